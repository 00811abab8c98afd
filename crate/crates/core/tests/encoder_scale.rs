use emofuse::encoder::{EncoderConfig, EncoderState};
use emofuse::rng::seeded;

/// Allocates the 24-layer, 1024-wide text encoder (about 2.4 GB).
#[test]
#[ignore = "allocates 2.4 GB"]
fn full_text_encoder_allocates() {
    let cfg = EncoderConfig::text_full(2000);
    let enc = EncoderState::new(cfg.clone(), &mut seeded(0)).unwrap();
    assert_eq!((enc.config().n_layers, enc.config().d_model, enc.config().max_len), (24, 1024, 512));
    assert_eq!(enc.params().num_scalars(), cfg.param_count());
    let blocks = enc.params().iter().filter(|(n, _)| n.ends_with(".attn.wq")).count();
    assert_eq!(blocks, 24);
}
