//! The end-to-end bimodal model: both encoders, the fusion head, and the
//! preprocessing that turns raw examples into token sequences.

use std::path::Path;

use crate::data::metrics::MetricReport;
use crate::data::{Dataset, Label, LabelMode, LabeledExample, Split, N_EMOTIONS};
use crate::encoder::{EncoderOutput, EncoderState};
use crate::error::{Error, Result};
use crate::fusion::{FusionHead, FusionTrace};
use crate::params::Bound;
use crate::persist::Checkpoint;
use crate::quantizer::{discretize, Codebook, Featurizer};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Var};
use crate::tokenizer::{self, Vocabulary};
use crate::tokens::TokenSequence;

pub const SPEECH_PREFIX: &str = "speech.";
pub const TEXT_PREFIX: &str = "text.";

/// An example after featurization, quantization and tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub id: String,
    pub speech: TokenSequence,
    pub text: TokenSequence,
    pub label: Label,
}

/// Raw example to token sequences.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    pub featurizer: Featurizer,
    pub codebook: Codebook,
    pub vocab: Vocabulary,
    pub speech_max_len: usize,
    pub text_max_len: usize,
}

impl Preprocessor {
    pub fn prepare(&self, ex: &LabeledExample, base_dir: &Path) -> Result<PreparedExample> {
        let frames = ex.frames(&self.featurizer, base_dir)?;
        Ok(PreparedExample {
            id: ex.id.clone(),
            speech: discretize(&frames, &self.codebook, self.speech_max_len)?,
            text: tokenizer::encode(&ex.text, &self.vocab, self.text_max_len),
            label: ex.label,
        })
    }

    pub fn prepare_split(&self, ds: &Dataset, split: Split) -> Result<Vec<PreparedExample>> {
        ds.split(split)
            .into_iter()
            .map(|e| self.prepare(e, &ds.base_dir))
            .collect()
    }
}

/// Model output for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    Score(f64),
}

/// Emotion with the largest (positive - negative) logit margin.
pub fn class_from_logits(logits: &[f64]) -> usize {
    let mut best = 0;
    let mut best_margin = f64::NEG_INFINITY;
    for c in 0..N_EMOTIONS {
        let m = logits[2 * c + 1] - logits[2 * c];
        if m > best_margin {
            best = c;
            best_margin = m;
        }
    }
    best
}

/// Both encoders and the fusion head. Unimodal heads leave the other encoder
/// untouched and unused.
#[derive(Clone, Debug)]
pub struct FusedModel {
    pub speech: EncoderState,
    pub text: EncoderState,
    pub fusion: FusionHead,
    pub mode: LabelMode,
}

impl FusedModel {
    pub fn new(speech: EncoderState, text: EncoderState, fusion: FusionHead, mode: LabelMode) -> Result<Self> {
        let fc = fusion.config();
        if fc.d_speech != speech.config().d_model || fc.d_text != text.config().d_model {
            return Err(Error::Config(format!(
                "fusion widths ({}, {}) do not match encoders ({}, {})",
                fc.d_speech,
                fc.d_text,
                speech.config().d_model,
                text.config().d_model
            )));
        }
        if fc.n_outputs != mode.n_outputs() {
            return Err(Error::Config(format!(
                "{} mode needs {} outputs, fusion head has {}",
                mode.name(),
                mode.n_outputs(),
                fc.n_outputs
            )));
        }
        Ok(Self { speech, text, fusion, mode })
    }

    pub fn uses_speech(&self) -> bool {
        self.fusion.kind().uses_speech()
    }

    pub fn uses_text(&self) -> bool {
        self.fusion.kind().uses_text()
    }

    /// Per-example training loss from a fusion trace.
    pub fn loss(&self, tape: &mut Tape, trace: &FusionTrace, label: Label) -> Result<Var> {
        match (self.mode, label) {
            (LabelMode::Categorical4, Label::Class(y)) => {
                let pairs = tape.reshape(trace.logits, &[N_EMOTIONS, 2])?;
                let targets: Vec<usize> = (0..N_EMOTIONS).map(|c| usize::from(c == y)).collect();
                tape.cross_entropy(pairs, &targets)
            }
            (LabelMode::Score, Label::Score(s)) => tape.l1_loss(trace.logits, &[s]),
            _ => Err(Error::Input(format!(
                "label {label:?} does not fit a {} model",
                self.mode.name()
            ))),
        }
    }

    /// Forward pass given optional pre-bound encoders. `None` for a used
    /// encoder means its hidden states are supplied in `cached`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_with(
        &self,
        tape: &mut Tape,
        ex: &PreparedExample,
        speech_bound: Option<&Bound>,
        text_bound: Option<&Bound>,
        fusion_bound: &Bound,
        cached: (Option<&EncoderOutput>, Option<&EncoderOutput>),
        mut rng: Option<&mut SeededRng>,
    ) -> Result<FusionTrace> {
        let hs = if self.uses_speech() {
            Some(match (speech_bound, cached.0) {
                (Some(b), _) => self.speech.forward(tape, b, &ex.speech, rng.as_deref_mut())?.hidden,
                (None, Some(c)) => tape.constant(c.hidden.clone()),
                (None, None) => return Err(Error::Usage("speech encoder output unavailable".into())),
            })
        } else {
            None
        };
        let ht = if self.uses_text() {
            Some(match (text_bound, cached.1) {
                (Some(b), _) => self.text.forward(tape, b, &ex.text, rng.as_deref_mut())?.hidden,
                (None, Some(c)) => tape.constant(c.hidden.clone()),
                (None, None) => return Err(Error::Usage("text encoder output unavailable".into())),
            })
        } else {
            None
        };
        self.fusion.forward(tape, fusion_bound, hs, ht, rng)
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, ex: &PreparedExample) -> Result<Vec<f64>> {
        self.logits_cached(ex, None, None)
    }

    /// Evaluation-mode logits, reusing precomputed encoder outputs when given.
    pub(crate) fn logits_cached(
        &self,
        ex: &PreparedExample,
        speech: Option<&EncoderOutput>,
        text: Option<&EncoderOutput>,
    ) -> Result<Vec<f64>> {
        let s = match (self.uses_speech(), speech) {
            (true, Some(c)) => Some(c.clone()),
            (true, None) => Some(self.speech.encode(&ex.speech)?),
            (false, _) => None,
        };
        let t = match (self.uses_text(), text) {
            (true, Some(c)) => Some(c.clone()),
            (true, None) => Some(self.text.encode(&ex.text)?),
            (false, _) => None,
        };
        Ok(self.fusion.fuse(s.as_ref(), t.as_ref())?.logits)
    }

    pub fn predict(&self, ex: &PreparedExample) -> Result<Prediction> {
        let logits = self.logits(ex)?;
        Ok(match self.mode {
            LabelMode::Categorical4 => Prediction::Class(class_from_logits(&logits)),
            LabelMode::Score => Prediction::Score(logits[0]),
        })
    }

    /// Metrics and mean loss over `examples`.
    pub fn evaluate(&self, examples: &[PreparedExample]) -> Result<Evaluation> {
        self.evaluate_cached(examples, &EncoderCache::default())
    }

    pub(crate) fn evaluate_cached(&self, examples: &[PreparedExample], cache: &EncoderCache) -> Result<Evaluation> {
        if examples.is_empty() {
            return Err(Error::Input("cannot evaluate on zero examples".into()));
        }
        let mut total_loss = 0.0;
        let mut class_preds = Vec::new();
        let mut class_golds = Vec::new();
        let mut score_preds = Vec::new();
        let mut score_golds = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            let logits = self.logits_cached(ex, cache.speech_at(i), cache.text_at(i))?;
            match (self.mode, ex.label) {
                (LabelMode::Categorical4, Label::Class(y)) => {
                    let mut nll = 0.0;
                    for c in 0..N_EMOTIONS {
                        let (neg, pos) = (logits[2 * c], logits[2 * c + 1]);
                        let m = neg.max(pos);
                        let lse = m + ((neg - m).exp() + (pos - m).exp()).ln();
                        nll += lse - if c == y { pos } else { neg };
                    }
                    total_loss += nll / N_EMOTIONS as f64;
                    class_preds.push(class_from_logits(&logits));
                    class_golds.push(y);
                }
                (LabelMode::Score, Label::Score(s)) => {
                    total_loss += (logits[0] - s).abs();
                    score_preds.push(logits[0]);
                    score_golds.push(s);
                }
                (_, label) => {
                    return Err(Error::Input(format!(
                        "{}: label {label:?} does not fit a {} model",
                        ex.id,
                        self.mode.name()
                    )))
                }
            }
        }
        let report = match self.mode {
            LabelMode::Categorical4 => MetricReport::categorical(&class_preds, &class_golds, N_EMOTIONS)?,
            LabelMode::Score => MetricReport::scores(&score_preds, &score_golds)?,
        };
        Ok(Evaluation {
            loss: total_loss / examples.len() as f64,
            report,
        })
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("model.mode", self.mode.name());
        self.speech.write_checkpoint(SPEECH_PREFIX, ckpt);
        self.text.write_checkpoint(TEXT_PREFIX, ckpt);
        self.fusion.write_checkpoint(ckpt);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.write_checkpoint(&mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(
            EncoderState::from_checkpoint(SPEECH_PREFIX, ckpt)?,
            EncoderState::from_checkpoint(TEXT_PREFIX, ckpt)?,
            FusionHead::from_checkpoint(ckpt)?,
            LabelMode::parse(ckpt.meta_str("model.mode")?)?,
        )
    }
}

/// Outputs of frozen encoders, aligned with an example slice.
#[derive(Clone, Debug, Default)]
pub(crate) struct EncoderCache {
    pub speech: Option<Vec<EncoderOutput>>,
    pub text: Option<Vec<EncoderOutput>>,
}

impl EncoderCache {
    pub fn build(model: &FusedModel, examples: &[PreparedExample], speech: bool, text: bool) -> Result<Self> {
        let speech = (speech && model.uses_speech())
            .then(|| examples.iter().map(|e| model.speech.encode(&e.speech)).collect::<Result<Vec<_>>>())
            .transpose()?;
        let text = (text && model.uses_text())
            .then(|| examples.iter().map(|e| model.text.encode(&e.text)).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(Self { speech, text })
    }

    pub fn speech_at(&self, i: usize) -> Option<&EncoderOutput> {
        self.speech.as_ref().map(|v| &v[i])
    }

    pub fn text_at(&self, i: usize) -> Option<&EncoderOutput> {
        self.text.as_ref().map(|v| &v[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub report: MetricReport,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_from_margin() {
        let mut logits = vec![0.0; 8];
        logits[5] = 2.0; // emotion 2 positive
        logits[6] = -1.0; // emotion 3 negative
        assert_eq!(class_from_logits(&logits), 2);
        assert_eq!(class_from_logits(&[0.0; 8]), 0);
    }
}
