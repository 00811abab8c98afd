mod common;

use emofuse::data::synthetic::{generate, SyntheticConfig};
use emofuse::data::{Dataset, Label, LabelMode};
use emofuse::encoder::{EncoderConfig, EncoderState};
use emofuse::error::Error;
use emofuse::fusion::FusionKind;
use emofuse::model::{FusedModel, PreparedExample};
use emofuse::persist::Checkpoint;
use emofuse::pipeline::{build_model, fit_preprocessor, init_encoders, PipelineConfig, PreparedSplits};
use emofuse::rng::seeded;
use emofuse::tokens::{Modality, TokenSequence};
use emofuse::training::{
    batch_gradients, run_finetune, run_pretraining, FinetuneConfig, Freeze, OptimizerState, PretrainConfig,
    StepRecord,
};
use rand::Rng;

fn splits(n: usize, flip_prob: f64, mode: LabelMode, cfg: &PipelineConfig) -> PreparedSplits {
    let ds: Dataset = generate(&SyntheticConfig {
        n_examples: n,
        seed: cfg.seed,
        flip_prob,
        mode,
        ..Default::default()
    })
    .unwrap();
    let (pre, _) = fit_preprocessor(&ds, cfg).unwrap();
    PreparedSplits::new(&ds, &pre).unwrap()
}

fn model(kind: FusionKind, mode: LabelMode, cfg: &PipelineConfig, n: usize) -> (FusedModel, PreparedSplits) {
    let s = splits(n, 0.25, mode, cfg);
    let ds = generate(&SyntheticConfig { n_examples: n, seed: cfg.seed, mode, ..Default::default() }).unwrap();
    let (pre, _) = fit_preprocessor(&ds, cfg).unwrap();
    let (speech, text) = init_encoders(&pre, cfg).unwrap();
    (build_model(speech, text, kind, mode, cfg).unwrap(), s)
}

fn same_bits(a: &FusedModel, b: &FusedModel, part: &str) -> bool {
    let (x, y) = match part {
        "speech" => (a.speech.params(), b.speech.params()),
        "text" => (a.text.params(), b.text.params()),
        _ => (a.fusion.params(), b.fusion.params()),
    };
    x.iter().zip(y.iter()).all(|((_, p), (_, q))| {
        p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits())
    })
}

#[test]
fn accumulation_factoring_is_bitwise_invariant() {
    let cfg = common::small_config(1, 16);
    for kind in [FusionKind::CoAttention, FusionKind::Shallow] {
        let (m, s) = model(kind, LabelMode::Categorical4, &cfg, 40);
        let batch: Vec<PreparedExample> = s.train.iter().take(16).cloned().collect();
        let mut tc = cfg.finetune.train.clone();
        tc.batch_size = 16;
        tc.accumulation = 1;
        let whole = batch_gradients(&m, &batch, &tc, 3).unwrap();
        tc.accumulation = 4;
        let split = batch_gradients(&m, &batch, &tc, 3).unwrap();
        assert_eq!(whole.loss.to_bits(), split.loss.to_bits());
        let flat = |g: &emofuse::training::BatchGradients| -> Vec<u64> {
            g.speech.iter().chain(g.text.iter()).flatten().chain(g.fusion.iter())
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(flat(&whole), flat(&split), "{kind:?}");
        assert!(whole.speech.is_some() && whole.text.is_some());
    }
}

#[test]
fn frozen_encoders_are_untouched() {
    let mut cfg = common::small_config(2, 16);
    cfg.finetune.epochs = 2;
    cfg.finetune.train.freeze = Freeze::parse("both").unwrap();
    let (mut m, s) = model(FusionKind::CoAttention, LabelMode::Categorical4, &cfg, 40);
    let before = m.clone();
    let g = batch_gradients(&m, &s.train[..4], &cfg.finetune.train, 0).unwrap();
    assert!(g.speech.is_none() && g.text.is_none());
    run_finetune(&mut m, &s.train, &s.valid, &cfg.finetune, &mut |_| {}).unwrap();
    assert!(same_bits(&before, &m, "speech"));
    assert!(same_bits(&before, &m, "text"));
    assert!(!same_bits(&before, &m, "fusion"));
}

#[test]
fn unimodal_model_leaves_other_encoder_alone() {
    let mut cfg = common::small_config(3, 16);
    cfg.finetune.epochs = 1;
    let (mut m, s) = model(FusionKind::SpeechOnly, LabelMode::Categorical4, &cfg, 40);
    let before = m.clone();
    run_finetune(&mut m, &s.train, &s.valid, &cfg.finetune, &mut |_| {}).unwrap();
    assert!(same_bits(&before, &m, "text"));
    assert!(!same_bits(&before, &m, "speech"));
}

#[test]
fn finetune_history_is_deterministic() {
    let mut cfg = common::small_config(4, 16);
    cfg.finetune.epochs = 2;
    for mode in [LabelMode::Categorical4, LabelMode::Score] {
        let (m, s) = model(FusionKind::Shallow, mode, &cfg, 40);
        let run = || {
            let mut mm = m.clone();
            let r = run_finetune(&mut mm, &s.train, &s.valid, &cfg.finetune, &mut |_| {}).unwrap();
            (r.history_csv(), r.steps, mm.to_checkpoint().to_bytes())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert!(a.0.starts_with("epoch,split,metric,value\n"));
    }
}

#[test]
fn best_epoch_is_kept() {
    let mut cfg = common::small_config(5, 16);
    cfg.finetune.epochs = 4;
    let (mut m, s) = model(FusionKind::Shallow, LabelMode::Categorical4, &cfg, 40);
    let r = run_finetune(&mut m, &s.train, &s.valid, &cfg.finetune, &mut |_| {}).unwrap();
    let best_valid = r
        .history
        .iter()
        .filter(|h| h.split == "valid" && h.metric == "accuracy")
        .map(|h| h.value)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_value, best_valid);
    assert_eq!(r.selection_metric, "valid_accuracy");
    assert_eq!(m.evaluate(&s.valid).unwrap().report.accuracy, best_valid);
}

#[test]
fn empty_training_set_is_an_input_error() {
    let cfg = common::small_config(6, 16);
    let (mut m, s) = model(FusionKind::Shallow, LabelMode::Categorical4, &cfg, 40);
    let err = run_finetune(&mut m, &[], &s.valid, &cfg.finetune, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

/// Multinomial logistic regression by full-batch gradient descent.
fn logistic_train_accuracy(x: &[Vec<f64>], y: &[usize], classes: usize) -> f64 {
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / x.len() as f64).sqrt().max(1e-9))
        .collect();
    let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect()).collect();
    let mut w = vec![vec![0.0; d + 1]; classes];
    let scores = |w: &Vec<Vec<f64>>, r: &[f64]| -> Vec<f64> {
        w.iter().map(|wc| wc[d] + r.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (r, &t) in z.iter().zip(y) {
            let s = scores(&w, r);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / tot - f64::from(u8::from(c == t));
                for j in 0..d {
                    grad[c][j] += g * r[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..classes {
            for j in 0..=d {
                w[c][j] -= 0.5 * grad[c][j] / z.len() as f64;
            }
        }
    }
    let hits = z
        .iter()
        .zip(y)
        .filter(|(r, &t)| {
            let s = scores(&w, r);
            (0..classes).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap() == t
        })
        .count();
    hits as f64 / z.len() as f64
}

#[test]
fn separable_data_is_fit_by_shallow_fusion() {
    let mut cfg = common::small_config(7, 32);
    cfg.finetune.epochs = 20;
    let s = splits(200, 0.0, LabelMode::Categorical4, &cfg);
    let ds = generate(&SyntheticConfig { n_examples: 200, seed: 7, flip_prob: 0.0, ..Default::default() }).unwrap();
    let (pre, _) = fit_preprocessor(&ds, &cfg).unwrap();
    let (speech, text) = init_encoders(&pre, &cfg).unwrap();

    let feats: Vec<Vec<f64>> = s
        .train
        .iter()
        .map(|e| {
            let mut v = speech.encode(&e.speech).unwrap().cls().to_vec();
            v.extend_from_slice(text.encode(&e.text).unwrap().cls());
            v
        })
        .collect();
    let labels: Vec<usize> = s
        .train
        .iter()
        .map(|e| match e.label {
            Label::Class(y) => y,
            Label::Score(_) => unreachable!(),
        })
        .collect();
    let oracle = logistic_train_accuracy(&feats, &labels, 4);
    assert!(oracle >= 0.9, "logistic regression on frozen features: {oracle}");

    let mut m = build_model(speech, text, FusionKind::Shallow, LabelMode::Categorical4, &cfg).unwrap();
    let r = run_finetune(&mut m, &s.train, &s.valid, &cfg.finetune, &mut |_| {}).unwrap();
    let best_train = r
        .history
        .iter()
        .filter(|h| h.split == "train" && h.metric == "accuracy")
        .map(|h| h.value)
        .fold(0.0, f64::max);
    assert!(best_train >= 0.99, "train accuracy {best_train}");
}

fn toy_corpus(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| TokenSequence::with_cls(Modality::Speech, (0..len).map(|_| rng.random_range(5..vocab as u32))))
        .collect()
}

fn pretrain_cfg(steps: usize) -> PretrainConfig {
    let mut cfg = PretrainConfig { total_steps: steps, ..Default::default() };
    cfg.train.batch_size = 4;
    cfg.train.peak_lr = 1e-3;
    cfg.train.seed = 11;
    cfg
}

#[test]
fn pretraining_is_deterministic_and_starts_near_uniform() {
    let vocab = 40;
    let corpus = toy_corpus(10, 12, vocab, 1);
    let cfg = pretrain_cfg(6);
    let run = || {
        let mut enc = EncoderState::new(EncoderConfig::tiny(vocab), &mut seeded(2)).unwrap();
        let mut opt = OptimizerState::new(cfg.train.adam);
        let curve = run_pretraining(&corpus, &mut enc, &cfg, &mut opt, &mut |_, _, _| Ok(())).unwrap();
        let mut ck = Checkpoint::new();
        enc.write_checkpoint("speech.", &mut ck);
        (curve, ck.to_bytes())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let ln_v = (vocab as f64).ln();
    assert!((a.0[0].loss - ln_v).abs() / ln_v < 0.05, "first loss {}", a.0[0].loss);
    assert_eq!(a.0.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
}

#[test]
fn resumed_pretraining_matches_uninterrupted_run() {
    let vocab = 40;
    let corpus = toy_corpus(7, 12, vocab, 3);
    let cfg = pretrain_cfg(9);
    let fresh = || EncoderState::new(EncoderConfig::tiny(vocab), &mut seeded(4)).unwrap();

    let mut full_enc = fresh();
    let mut full_opt = OptimizerState::new(cfg.train.adam);
    let full = run_pretraining(&corpus, &mut full_enc, &cfg, &mut full_opt, &mut |_, _, _| Ok(())).unwrap();

    let mut saved: Option<Checkpoint> = None;
    let mut enc = fresh();
    let mut opt = OptimizerState::new(cfg.train.adam);
    let err = run_pretraining(&corpus, &mut enc, &cfg, &mut opt, &mut |r: &StepRecord, e, o| {
        if r.step == 4 {
            let mut ck = Checkpoint::new();
            e.write_checkpoint("speech.", &mut ck);
            o.write_checkpoint(&mut ck);
            saved = Some(Checkpoint::from_bytes(&ck.to_bytes(), "mem".as_ref())?);
            return Err(Error::Usage("interrupted".into()));
        }
        Ok(())
    });
    assert!(err.is_err());
    let ck = saved.unwrap();
    let mut enc = EncoderState::from_checkpoint("speech.", &ck).unwrap();
    let mut opt = OptimizerState::from_checkpoint(&ck).unwrap();
    assert_eq!(opt.step(), 4);
    let rest = run_pretraining(&corpus, &mut enc, &cfg, &mut opt, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(rest, full[4..].to_vec());
    let bytes = |e: &EncoderState| {
        let mut c = Checkpoint::new();
        e.write_checkpoint("speech.", &mut c);
        c.to_bytes()
    };
    assert_eq!(bytes(&enc), bytes(&full_enc));
}

#[test]
fn pretraining_rejects_empty_corpus() {
    let mut enc = EncoderState::new(EncoderConfig::tiny(20), &mut seeded(0)).unwrap();
    let cfg = pretrain_cfg(2);
    let mut opt = OptimizerState::new(cfg.train.adam);
    let err = run_pretraining(&[], &mut enc, &cfg, &mut opt, &mut |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
}

#[test]
fn finetune_defaults_follow_the_published_recipe() {
    let ft = FinetuneConfig::default();
    assert_eq!(ft.train.peak_lr, 1e-5);
    assert_eq!(ft.train.dropout, 0.1);
    assert_eq!(ft.train.batch_size, 16);
}
