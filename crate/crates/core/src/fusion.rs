//! Combining the two encoders' outputs into logits.
//!
//! * Shallow fusion concatenates the speech and text CLS vectors (speech
//!   first) and applies one linear layer.
//! * Co-attentional fusion first lets each CLS act as a single query over the
//!   other modality's full hidden sequence, adds the attended vector back onto
//!   the CLS, and then applies the same concatenate-and-project head.
//! * Unimodal heads project a single CLS vector.
//!
//! Per direction the co-attention block holds `W_Q [d_q x d_q]`,
//! `W_K [d_kv x d_q]`, `W_V [d_kv x d_q]` and `W_O [d_q x d_q]`, each with a
//! bias, where `d_q` is the querying modality's width. There is no layer norm
//! inside the block, and no nonlinearity between it and the prediction head.

use serde::{Deserialize, Serialize};

use crate::attention::multi_head_attention;
use crate::encoder::{init_tensor, maybe_dropout, EncoderOutput, Init};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::persist::Checkpoint;
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    Shallow,
    CoAttention,
    SpeechOnly,
    TextOnly,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Shallow,
        FusionKind::CoAttention,
        FusionKind::SpeechOnly,
        FusionKind::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Shallow => "shallow",
            FusionKind::CoAttention => "coattn",
            FusionKind::SpeechOnly => "speech-only",
            FusionKind::TextOnly => "text-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown fusion {s:?}")))
    }

    pub fn uses_speech(self) -> bool {
        self != FusionKind::TextOnly
    }

    pub fn uses_text(self) -> bool {
        self != FusionKind::SpeechOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub d_speech: usize,
    pub d_text: usize,
    pub n_outputs: usize,
    /// Heads per co-attention direction.
    pub n_heads: usize,
    pub dropout: f64,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outputs == 0 {
            return Err(Error::Config("n_outputs must be positive".into()));
        }
        if self.kind == FusionKind::CoAttention
            && (self.n_heads == 0
                || !self.d_speech.is_multiple_of(self.n_heads)
                || !self.d_text.is_multiple_of(self.n_heads))
        {
            return Err(Error::Config(format!(
                "{} co-attention heads do not divide widths {} and {}",
                self.n_heads, self.d_speech, self.d_text
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the vector the prediction head consumes.
    pub fn head_input(&self) -> usize {
        match self.kind {
            FusionKind::Shallow | FusionKind::CoAttention => self.d_speech + self.d_text,
            FusionKind::SpeechOnly => self.d_speech,
            FusionKind::TextOnly => self.d_text,
        }
    }

    /// `d_in * n_outputs + n_outputs`.
    pub fn head_param_count(&self) -> usize {
        self.head_input() * self.n_outputs + self.n_outputs
    }

    /// Co-attention parameters in closed form (zero for other kinds).
    pub fn co_attention_param_count(&self) -> usize {
        if self.kind != FusionKind::CoAttention {
            return 0;
        }
        let (s, t) = (self.d_speech, self.d_text);
        let speech_query = 2 * s * s + 2 * s * t + 4 * s;
        let text_query = 2 * t * t + 2 * s * t + 4 * t;
        speech_query + text_query
    }

    pub fn param_count(&self) -> usize {
        self.head_param_count() + self.co_attention_param_count()
    }

    fn write_meta(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("fusion.kind", self.kind.name());
        ckpt.set_meta("fusion.d_speech", self.d_speech);
        ckpt.set_meta("fusion.d_text", self.d_text);
        ckpt.set_meta("fusion.n_outputs", self.n_outputs);
        ckpt.set_meta("fusion.n_heads", self.n_heads);
        ckpt.set_meta("fusion.dropout", self.dropout);
    }

    fn read_meta(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = Self {
            kind: FusionKind::parse(ckpt.meta_str("fusion.kind")?)?,
            d_speech: ckpt.meta_parse("fusion.d_speech")?,
            d_text: ckpt.meta_parse("fusion.d_text")?,
            n_outputs: ckpt.meta_parse("fusion.n_outputs")?,
            n_heads: ckpt.meta_parse("fusion.n_heads")?,
            dropout: ckpt.meta_parse("fusion.dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct DirectionIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct CoAttentionIds {
    speech_query: DirectionIds,
    text_query: DirectionIds,
}

#[derive(Clone, Debug)]
struct Layout {
    co: Option<CoAttentionIds>,
    head_w: ParamId,
    head_b: ParamId,
}

fn build_layout(cfg: &FusionConfig, mut add: impl FnMut(&str, &[usize], Init) -> ParamId) -> Layout {
    let (s, t) = (cfg.d_speech, cfg.d_text);
    let co = (cfg.kind == FusionKind::CoAttention).then(|| {
        let mut dir = |prefix: &str, dq: usize, dkv: usize| DirectionIds {
            wq: add(&format!("{prefix}.wq"), &[dq, dq], Init::Normal),
            bq: add(&format!("{prefix}.bq"), &[dq], Init::Zeros),
            wk: add(&format!("{prefix}.wk"), &[dkv, dq], Init::Normal),
            bk: add(&format!("{prefix}.bk"), &[dq], Init::Zeros),
            wv: add(&format!("{prefix}.wv"), &[dkv, dq], Init::Normal),
            bv: add(&format!("{prefix}.bv"), &[dq], Init::Zeros),
            wo: add(&format!("{prefix}.wo"), &[dq, dq], Init::Normal),
            bo: add(&format!("{prefix}.bo"), &[dq], Init::Zeros),
        };
        CoAttentionIds {
            speech_query: dir("coattn.speech_query", s, t),
            text_query: dir("coattn.text_query", t, s),
        }
    });
    Layout {
        co,
        head_w: add("head.w", &[cfg.head_input(), cfg.n_outputs], Init::Normal),
        head_b: add("head.b", &[cfg.n_outputs], Init::Zeros),
    }
}

/// Fusion parameters plus the prediction head.
#[derive(Clone, Debug)]
pub struct FusionHead {
    config: FusionConfig,
    params: ParamStore,
    layout: Layout,
}

/// Tape handles from a fusion forward pass.
#[derive(Clone, Debug)]
pub struct FusionTrace {
    /// `[1 x n_outputs]`.
    pub logits: Var,
    /// Per-head `[1 x L_text]` weights of the speech-query direction.
    pub speech_query_attention: Vec<Var>,
    /// Per-head `[1 x L_speech]` weights of the text-query direction.
    pub text_query_attention: Vec<Var>,
}

/// Materialized fusion result.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub logits: Vec<f64>,
    pub speech_query_attention: Vec<Vec<f64>>,
    pub text_query_attention: Vec<Vec<f64>>,
}

impl FusionHead {
    pub fn new(config: FusionConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, |n, s, init| params.add(n, init_tensor(s, init, rng)));
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// All parameters zero.
    pub fn zeros(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, |n, s, _| params.add(n, Tensor::zeros(s)));
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn kind(&self) -> FusionKind {
        self.config.kind
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

    pub fn head_weight(&self) -> &Tensor {
        self.params.get(self.layout.head_w)
    }

    pub fn head_bias(&self) -> &Tensor {
        self.params.get(self.layout.head_b)
    }

    pub fn set_head(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        for (id, t) in [(self.layout.head_w, weight), (self.layout.head_b, bias)] {
            let slot = self.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "set_head",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(())
    }

    /// Scalar count of the co-attention block, by enumeration.
    pub fn co_attention_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("coattn."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Scalar count of the prediction head, by enumeration.
    pub fn head_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Zeroes every co-attention weight and bias.
    pub fn zero_co_attention(&mut self) {
        for (n, t) in self.params.tensors_mut() {
            if n.starts_with("coattn.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check_width(&self, got: usize, want: usize, what: &str) -> Result<()> {
        if got != want {
            return Err(Error::Config(format!(
                "{what} width {got} does not match fusion head ({want})"
            )));
        }
        Ok(())
    }

    fn project(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        tape.linear(features, bound[self.layout.head_w], bound[self.layout.head_b])
    }

    /// `W [cls_s ; cls_t] + b`. Both inputs are `[1 x d]` rows.
    pub fn shallow_fuse(&self, tape: &mut Tape, bound: &Bound, cls_s: Var, cls_t: Var) -> Result<Var> {
        self.check_width(tape.value(cls_s).cols(), self.config.d_speech, "speech CLS")?;
        self.check_width(tape.value(cls_t).cols(), self.config.d_text, "text CLS")?;
        let joint = tape.concat_cols(&[cls_s, cls_t])?;
        self.project(tape, bound, joint)
    }

    /// Projection of a single CLS row.
    pub fn unimodal_head(&self, tape: &mut Tape, bound: &Bound, cls: Var) -> Result<Var> {
        self.check_width(tape.value(cls).cols(), self.config.head_input(), "CLS")?;
        self.project(tape, bound, cls)
    }

    /// Each CLS queries the other modality's hidden sequence; the attended
    /// vector is projected and added back onto the CLS.
    ///
    /// Returns the modified `(cls_s, cls_t)` rows and the per-direction
    /// attention weights.
    pub fn co_attend(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        speech_hidden: Var,
        text_hidden: Var,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<(Var, Var, Vec<Var>, Vec<Var>)> {
        let co = self
            .layout
            .co
            .as_ref()
            .ok_or_else(|| Error::Config("fusion head has no co-attention block".into()))?;
        self.check_width(tape.value(speech_hidden).cols(), self.config.d_speech, "speech")?;
        self.check_width(tape.value(text_hidden).cols(), self.config.d_text, "text")?;
        if tape.value(speech_hidden).rows() == 0 || tape.value(text_hidden).rows() == 0 {
            return Err(Error::Input("co-attention needs non-empty sequences".into()));
        }
        let cls_s = tape.gather_rows(speech_hidden, &[0])?;
        let cls_t = tape.gather_rows(text_hidden, &[0])?;
        let p = self.config.dropout;
        let mut attend = |tape: &mut Tape, ids: &DirectionIds, cls: Var, other: Var| {
            let q = tape.linear(cls, bound[ids.wq], bound[ids.bq])?;
            let k = tape.linear(other, bound[ids.wk], bound[ids.bk])?;
            let v = tape.linear(other, bound[ids.wv], bound[ids.bv])?;
            let (a, w) = multi_head_attention(tape, q, k, v, self.config.n_heads)?;
            let o = tape.linear(a, bound[ids.wo], bound[ids.bo])?;
            let o = maybe_dropout(tape, o, p, dropout_rng.as_deref_mut())?;
            Ok::<_, Error>((tape.add(cls, o)?, w))
        };
        let (new_s, ws) = attend(tape, &co.speech_query, cls_s, text_hidden)?;
        let (new_t, wt) = attend(tape, &co.text_query, cls_t, speech_hidden)?;
        Ok((new_s, new_t, ws, wt))
    }

    /// Full fusion forward for whichever kind this head is.
    ///
    /// `speech_hidden` / `text_hidden` are `[L x d]` encoder outputs; the one
    /// a unimodal head does not use may be `None`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        speech_hidden: Option<Var>,
        text_hidden: Option<Var>,
        dropout_rng: Option<&mut SeededRng>,
    ) -> Result<FusionTrace> {
        let need = |h: Option<Var>, what: &str| {
            h.ok_or_else(|| Error::Config(format!("{} fusion needs {what} input", self.kind().name())))
        };
        let mut speech_query_attention = Vec::new();
        let mut text_query_attention = Vec::new();
        let logits = match self.config.kind {
            FusionKind::Shallow => {
                let cls_s = tape.gather_rows(need(speech_hidden, "speech")?, &[0])?;
                let cls_t = tape.gather_rows(need(text_hidden, "text")?, &[0])?;
                self.shallow_fuse(tape, bound, cls_s, cls_t)?
            }
            FusionKind::CoAttention => {
                let (s, t, ws, wt) = self.co_attend(
                    tape,
                    bound,
                    need(speech_hidden, "speech")?,
                    need(text_hidden, "text")?,
                    dropout_rng,
                )?;
                speech_query_attention = ws;
                text_query_attention = wt;
                self.shallow_fuse(tape, bound, s, t)?
            }
            FusionKind::SpeechOnly => {
                let cls = tape.gather_rows(need(speech_hidden, "speech")?, &[0])?;
                self.unimodal_head(tape, bound, cls)?
            }
            FusionKind::TextOnly => {
                let cls = tape.gather_rows(need(text_hidden, "text")?, &[0])?;
                self.unimodal_head(tape, bound, cls)?
            }
        };
        Ok(FusionTrace {
            logits,
            speech_query_attention,
            text_query_attention,
        })
    }

    /// Evaluation-mode fusion of materialized encoder outputs.
    pub fn fuse(&self, speech: Option<&EncoderOutput>, text: Option<&EncoderOutput>) -> Result<FusionOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let hs = speech.map(|o| tape.constant(o.hidden.clone()));
        let ht = text.map(|o| tape.constant(o.hidden.clone()));
        let trace = self.forward(&mut tape, &bound, hs, ht, None)?;
        let rows = |tape: &Tape, vs: &[Var]| vs.iter().map(|v| tape.value(*v).data().to_vec()).collect();
        Ok(FusionOutput {
            logits: tape.value(trace.logits).data().to_vec(),
            speech_query_attention: rows(&tape, &trace.speech_query_attention),
            text_query_attention: rows(&tape, &trace.text_query_attention),
        })
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.config.write_meta(ckpt);
        self.params.write_blocks("fusion.", ckpt);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut head = Self::zeros(FusionConfig::read_meta(ckpt)?)?;
        head.params.read_blocks("fusion.", ckpt)?;
        Ok(head)
    }
}
