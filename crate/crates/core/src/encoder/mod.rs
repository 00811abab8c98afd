//! BERT-like transformer encoder over token IDs.
//!
//! Architecture: learned token and position embeddings, `n_layers` pre-norm
//! residual blocks (`x + attn(LN(x))`, then `x + ff(LN(x))` with a GELU
//! feed-forward), and a final layer norm. The masked-token head reuses the
//! token embedding matrix and adds only a per-token bias.
//!
//! Parameter count, with `V` = vocab, `P` = max_len, `d` = d_model,
//! `f` = d_ff and `L` = n_layers:
//!
//! ```text
//! V*d + P*d + L*(4d^2 + 2*d*f + 9d + f) + 2d + V
//! ```

mod mlm;

pub use mlm::{mask_corrupt, MaskedExample, MASK_FRACTION, RANDOM_FRACTION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::multi_head_attention;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::persist::Checkpoint;
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};
use crate::tokens::{TokenSequence, N_SPECIALS};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale speech encoder.
    pub fn speech_desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_len: 256,
            dropout: 0.1,
        }
    }

    /// Desk-scale text encoder.
    pub fn text_desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 160,
            n_heads: 4,
            d_ff: 640,
            vocab_size,
            max_len: 64,
            dropout: 0.1,
        }
    }

    /// BERT-base shaped speech encoder (12 layers, 768 wide, 2048 positions).
    pub fn speech_full(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size,
            max_len: 2048,
            dropout: 0.1,
        }
    }

    /// Large text encoder (24 layers, 1024 wide, 512 positions).
    pub fn text_full(vocab_size: usize) -> Self {
        Self {
            n_layers: 24,
            d_model: 1024,
            n_heads: 16,
            d_ff: 4096,
            vocab_size,
            max_len: 512,
            dropout: 0.1,
        }
    }

    /// Two-layer, 16-wide configuration for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size,
            max_len: 16,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size <= N_SPECIALS as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        if self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config("d_ff and n_layers must be positive".into()));
        }
        Ok(())
    }

    /// Parameters in one transformer block.
    pub fn per_layer_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * d * d + 2 * d * f + 9 * d + f
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_len * d
            + self.n_layers * self.per_layer_params()
            + 2 * d
            + self.vocab_size
    }

    /// Named parameter shapes in canonical order, without allocating them.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        build_layout(self, |name, shape, _| {
            out.push((name.to_string(), shape.to_vec()));
            ParamId::from_index(out.len() - 1)
        });
        out
    }

    pub(crate) fn write_meta(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.set_meta(format!("{prefix}n_layers"), self.n_layers);
        ckpt.set_meta(format!("{prefix}d_model"), self.d_model);
        ckpt.set_meta(format!("{prefix}n_heads"), self.n_heads);
        ckpt.set_meta(format!("{prefix}d_ff"), self.d_ff);
        ckpt.set_meta(format!("{prefix}vocab_size"), self.vocab_size);
        ckpt.set_meta(format!("{prefix}max_len"), self.max_len);
        ckpt.set_meta(format!("{prefix}dropout"), self.dropout);
    }

    pub(crate) fn read_meta(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let cfg = Self {
            n_layers: ckpt.meta_parse(&format!("{prefix}n_layers"))?,
            d_model: ckpt.meta_parse(&format!("{prefix}d_model"))?,
            n_heads: ckpt.meta_parse(&format!("{prefix}n_heads"))?,
            d_ff: ckpt.meta_parse(&format!("{prefix}d_ff"))?,
            vocab_size: ckpt.meta_parse(&format!("{prefix}vocab_size"))?,
            max_len: ckpt.meta_parse(&format!("{prefix}max_len"))?,
            dropout: ckpt.meta_parse(&format!("{prefix}dropout"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_bias: ParamId,
    mlm_bias: ParamId,
}

fn build_layout(
    cfg: &EncoderConfig,
    mut add: impl FnMut(&str, &[usize], Init) -> ParamId,
) -> Layout {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let tok_emb = add("tok_emb", &[cfg.vocab_size, d], Init::Normal);
    let pos_emb = add("pos_emb", &[cfg.max_len, d], Init::Normal);
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let mut p = |n: &str, s: &[usize], init| add(&format!("layers.{i}.{n}"), s, init);
            LayerIds {
                ln1_gain: p("ln1.gain", &[d], Init::Ones),
                ln1_bias: p("ln1.bias", &[d], Init::Zeros),
                wq: p("attn.wq", &[d, d], Init::Normal),
                bq: p("attn.bq", &[d], Init::Zeros),
                wk: p("attn.wk", &[d, d], Init::Normal),
                bk: p("attn.bk", &[d], Init::Zeros),
                wv: p("attn.wv", &[d, d], Init::Normal),
                bv: p("attn.bv", &[d], Init::Zeros),
                wo: p("attn.wo", &[d, d], Init::Normal),
                bo: p("attn.bo", &[d], Init::Zeros),
                ln2_gain: p("ln2.gain", &[d], Init::Ones),
                ln2_bias: p("ln2.bias", &[d], Init::Zeros),
                w1: p("ff.w1", &[d, f], Init::Normal),
                b1: p("ff.b1", &[f], Init::Zeros),
                w2: p("ff.w2", &[f, d], Init::Normal),
                b2: p("ff.b2", &[d], Init::Zeros),
            }
        })
        .collect();
    Layout {
        tok_emb,
        pos_emb,
        layers,
        final_gain: add("final_ln.gain", &[d], Init::Ones),
        final_bias: add("final_ln.bias", &[d], Init::Zeros),
        mlm_bias: add("mlm_bias", &[cfg.vocab_size], Init::Zeros),
    }
}

pub(crate) fn init_tensor(shape: &[usize], init: Init, rng: &mut SeededRng) -> Tensor {
    match init {
        Init::Normal => Tensor::randn(shape, INIT_STD, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
    }
}

/// Learnable parameters of one encoder.
#[derive(Clone, Debug)]
pub struct EncoderState {
    config: EncoderConfig,
    params: ParamStore,
    layout: Layout,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// `[L x d_model]` final hidden states.
    pub hidden: Var,
    /// Attention weights, indexed `[layer][head]`, each `[L x L]`.
    pub attention: Vec<Vec<Var>>,
}

/// Materialized encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Tensor,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.hidden.cols()
    }

    pub fn cls(&self) -> &[f64] {
        self.hidden.row(0)
    }
}

impl EncoderState {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn new(config: EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, |name, shape, init| {
            params.add(name, init_tensor(shape, init, rng))
        });
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dropout = p;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn token_embeddings(&self) -> &Tensor {
        self.params.get(self.layout.tok_emb)
    }

    pub fn position_embeddings_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.layout.pos_emb)
    }

    pub fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence of length {} exceeds encoder context {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(bad) = seq.ids().iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the encoder on `tape`. Dropout is applied iff `dropout_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: &TokenSequence,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<EncoderTrace> {
        self.check_sequence(seq)?;
        let cfg = &self.config;
        let ids: Vec<usize> = seq.ids().iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = self.config.dropout;

        let tok = tape.gather_rows(bound[self.layout.tok_emb], &ids)?;
        let pos = tape.gather_rows(bound[self.layout.pos_emb], &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = maybe_dropout(tape, x, p, dropout_rng.as_deref_mut())?;

        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in &self.layout.layers {
            let h = tape.layer_norm(x, bound[l.ln1_gain], bound[l.ln1_bias], LAYER_NORM_EPS)?;
            let q = tape.linear(h, bound[l.wq], bound[l.bq])?;
            let k = tape.linear(h, bound[l.wk], bound[l.bk])?;
            let v = tape.linear(h, bound[l.wv], bound[l.bv])?;
            let (a, weights) = multi_head_attention(tape, q, k, v, cfg.n_heads)?;
            attention.push(weights);
            let a = tape.linear(a, bound[l.wo], bound[l.bo])?;
            let a = maybe_dropout(tape, a, p, dropout_rng.as_deref_mut())?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, bound[l.ln2_gain], bound[l.ln2_bias], LAYER_NORM_EPS)?;
            let f = tape.linear(h, bound[l.w1], bound[l.b1])?;
            let f = tape.gelu(f);
            let f = tape.linear(f, bound[l.w2], bound[l.b2])?;
            let f = maybe_dropout(tape, f, p, dropout_rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let hidden = tape.layer_norm(
            x,
            bound[self.layout.final_gain],
            bound[self.layout.final_bias],
            LAYER_NORM_EPS,
        )?;
        Ok(EncoderTrace { hidden, attention })
    }

    /// Evaluation-mode forward pass (no dropout, no gradients).
    pub fn encode(&self, seq: &TokenSequence) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let trace = self.forward(&mut tape, &bound, seq, None)?;
        Ok(EncoderOutput {
            hidden: tape.value(trace.hidden).clone(),
        })
    }

    /// Mean cross-entropy of the weight-tied head at the masked positions.
    pub fn masked_lm_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        example: &MaskedExample,
        dropout_rng: Option<&mut SeededRng>,
    ) -> Result<Var> {
        if example.positions.is_empty() {
            return Err(Error::Input("masked LM loss needs at least one target".into()));
        }
        let trace = self.forward(tape, bound, &example.corrupted, dropout_rng)?;
        let picked = tape.gather_rows(trace.hidden, &example.positions)?;
        let emb_t = tape.transpose(bound[self.layout.tok_emb])?;
        let logits = tape.matmul(picked, emb_t)?;
        let logits = tape.add_row(logits, bound[self.layout.mlm_bias])?;
        let targets: Vec<usize> = example.targets.iter().map(|&t| t as usize).collect();
        tape.cross_entropy(logits, &targets)
    }

    /// Evaluation-mode masked LM loss value.
    pub fn masked_lm_loss_value(&self, example: &MaskedExample) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let loss = self.masked_lm_loss(&mut tape, &bound, example, None)?;
        Ok(tape.value(loss).item())
    }

    pub fn write_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        self.config.write_meta(prefix, ckpt);
        self.params.write_blocks(prefix, ckpt);
    }

    pub fn from_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let config = EncoderConfig::read_meta(prefix, ckpt)?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, |name, shape, _| {
            params.add(name, Tensor::zeros(shape))
        });
        params.read_blocks(prefix, ckpt)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }
}

pub(crate) fn maybe_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(x, p, r),
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tokens::Modality;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::with_cls(Modality::Speech, ids.iter().copied())
    }

    #[test]
    fn output_shape_matches_sequence() {
        let enc = EncoderState::new(EncoderConfig::tiny(11), &mut seeded(0)).unwrap();
        let out = enc.encode(&seq(&[5, 6, 7, 8])).unwrap();
        assert_eq!(out.hidden.shape(), &[5, 16]);
        assert_eq!(out.cls(), out.hidden.row(0));
        assert!(out.hidden.is_finite());
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let enc = EncoderState::new(EncoderConfig::tiny(11), &mut seeded(1)).unwrap();
        let s = seq(&[5, 9, 10]);
        assert_eq!(enc.encode(&s).unwrap(), enc.encode(&s).unwrap());
    }

    #[test]
    fn last_token_influences_cls() {
        let enc = EncoderState::new(EncoderConfig::tiny(11), &mut seeded(2)).unwrap();
        let a = enc.encode(&seq(&[5, 6, 7])).unwrap();
        let b = enc.encode(&seq(&[5, 6, 8])).unwrap();
        assert_ne!(a.cls(), b.cls());
    }

    #[test]
    fn overlong_and_out_of_vocab_rejected() {
        let enc = EncoderState::new(EncoderConfig::tiny(11), &mut seeded(0)).unwrap();
        let long = seq(&[5; 16]);
        assert!(matches!(enc.encode(&long), Err(Error::Input(_))));
        assert!(matches!(enc.encode(&seq(&[11])), Err(Error::Input(_))));
    }

    #[test]
    fn closed_form_matches_allocated_count() {
        let cfg = EncoderConfig::tiny(11);
        let enc = EncoderState::new(cfg.clone(), &mut seeded(0)).unwrap();
        assert_eq!(enc.params().num_scalars(), cfg.param_count());
        let by_shape: usize = cfg
            .param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(by_shape, cfg.param_count());
    }

    #[test]
    fn depth_is_linear() {
        let cfg = EncoderConfig::speech_desk(261);
        let mut deep = cfg.clone();
        deep.n_layers *= 2;
        assert_eq!(
            deep.param_count() - cfg.param_count(),
            cfg.n_layers * cfg.per_layer_params()
        );
    }

    #[test]
    fn tied_head_adds_only_bias() {
        let cfg = EncoderConfig::tiny(11);
        let mut bigger = cfg.clone();
        bigger.vocab_size += 1;
        assert_eq!(bigger.param_count() - cfg.param_count(), cfg.d_model + 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = EncoderConfig::tiny(11);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::tiny(11);
        cfg.max_len = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = EncoderState::new(EncoderConfig::tiny(11), &mut seeded(4)).unwrap();
        let mut ckpt = Checkpoint::new();
        enc.write_checkpoint("speech.", &mut ckpt);
        let back = EncoderState::from_checkpoint("speech.", &ckpt).unwrap();
        assert_eq!(back.config(), enc.config());
        assert_eq!(back.params(), enc.params());
    }
}
