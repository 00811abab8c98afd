//! End-to-end recipes shared by the command line and the tests: fitting the
//! tokenizers, pretraining, building models and running the ablation grid.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMode, Split};
use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionHead, FusionKind};
use crate::model::{Evaluation, FusedModel, PreparedExample, Preprocessor};
use crate::quantizer::{train_codebook, Featurizer, FrameFeaturizerConfig, KmeansReport};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::tokenizer::build_vocab;
use crate::tokens::TokenSequence;
use crate::training::{
    run_finetune, run_pretraining, FinetuneConfig, FinetuneReport, Freeze, OptimizerState, PretrainConfig,
    StepRecord,
};

/// Encoder hyperparameters other than the vocabulary, which comes from the
/// fitted tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl EncoderShape {
    pub fn config(&self, vocab_size: usize, dropout: f64) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            dropout,
        }
    }

    fn of(c: &EncoderConfig) -> Self {
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_len: c.max_len,
        }
    }

    pub fn speech_desk() -> Self {
        Self::of(&EncoderConfig::speech_desk(6))
    }

    pub fn text_desk() -> Self {
        Self::of(&EncoderConfig::text_desk(6))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub featurizer: FrameFeaturizerConfig,
    pub codebook_size: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub vocab_max_size: usize,
    pub speech_encoder: EncoderShape,
    pub text_encoder: EncoderShape,
    pub coattn_heads: usize,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            featurizer: FrameFeaturizerConfig::default(),
            codebook_size: 256,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            vocab_max_size: 2000,
            speech_encoder: EncoderShape::speech_desk(),
            text_encoder: EncoderShape::text_desk(),
            coattn_heads: 4,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Fits the codebook on the training split's frames and the vocabulary on
/// its transcripts.
pub fn fit_preprocessor(ds: &Dataset, cfg: &PipelineConfig) -> Result<(Preprocessor, KmeansReport)> {
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Input("dataset has no training examples".into()));
    }
    let featurizer = Featurizer::new(cfg.featurizer.clone())?;
    let mut rows = Vec::new();
    for ex in &train {
        let f = ex.frames(&featurizer, &ds.base_dir)?;
        rows.extend(f.into_data());
    }
    let dim = cfg.featurizer.n_features;
    let frames = Tensor::new(vec![rows.len() / dim, dim], rows)?;
    let (codebook, report) = train_codebook(
        &frames,
        cfg.codebook_size,
        derive_seed(cfg.seed, &[1]),
        cfg.kmeans_max_iters,
        cfg.kmeans_tol,
    )?;
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&texts, cfg.vocab_max_size)?;
    Ok((
        Preprocessor {
            featurizer,
            codebook,
            vocab,
            speech_max_len: cfg.speech_encoder.max_len,
            text_max_len: cfg.text_encoder.max_len,
        },
        report,
    ))
}

/// Tokenized train/valid/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplits {
    pub mode: LabelMode,
    pub train: Vec<PreparedExample>,
    pub valid: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
}

impl PreparedSplits {
    pub fn new(ds: &Dataset, pre: &Preprocessor) -> Result<Self> {
        let mode = ds
            .mode()
            .ok_or_else(|| Error::Input("dataset is empty".into()))?;
        Ok(Self {
            mode,
            train: pre.prepare_split(ds, Split::Train)?,
            valid: pre.prepare_split(ds, Split::Valid)?,
            test: pre.prepare_split(ds, Split::Test)?,
        })
    }

    pub fn speech_corpus(&self) -> Vec<TokenSequence> {
        self.train.iter().map(|e| e.speech.clone()).collect()
    }

    pub fn text_corpus(&self) -> Vec<TokenSequence> {
        self.train.iter().map(|e| e.text.clone()).collect()
    }
}

/// Freshly initialized encoders for a preprocessor's vocabularies.
pub fn init_encoders(pre: &Preprocessor, cfg: &PipelineConfig) -> Result<(EncoderState, EncoderState)> {
    let dropout = cfg.finetune.train.dropout;
    let speech = EncoderState::new(
        cfg.speech_encoder.config(pre.codebook.vocab_size(), dropout),
        &mut seeded(derive_seed(cfg.seed, &[2])),
    )?;
    let text = EncoderState::new(
        cfg.text_encoder.config(pre.vocab.len(), dropout),
        &mut seeded(derive_seed(cfg.seed, &[3])),
    )?;
    Ok((speech, text))
}

/// Masked-token pretraining of one encoder; returns the loss curve.
pub fn pretrain_encoder(
    encoder: &mut EncoderState,
    corpus: &[TokenSequence],
    cfg: &PretrainConfig,
    on_step: &mut dyn FnMut(&StepRecord, &EncoderState, &OptimizerState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut opt = OptimizerState::new(cfg.train.adam);
    run_pretraining(corpus, encoder, cfg, &mut opt, on_step)
}

pub fn build_model(
    speech: EncoderState,
    text: EncoderState,
    kind: FusionKind,
    mode: LabelMode,
    cfg: &PipelineConfig,
) -> Result<FusedModel> {
    let fusion_cfg = FusionConfig {
        kind,
        d_speech: speech.config().d_model,
        d_text: text.config().d_model,
        n_outputs: mode.n_outputs(),
        n_heads: cfg.coattn_heads,
        dropout: cfg.finetune.train.dropout,
    };
    let fusion = FusionHead::new(fusion_cfg, &mut seeded(derive_seed(cfg.seed, &[4, kind as u64])))?;
    FusedModel::new(speech, text, fusion, mode)
}

/// Rejects fusion/freeze combinations that leave nothing meaningful to run.
pub fn check_combination(kind: FusionKind, freeze: Freeze) -> Result<()> {
    if kind == FusionKind::SpeechOnly && freeze.text_encoder && !freeze.speech_encoder {
        return Err(Error::Usage("freezing the text encoder has no effect on a speech-only model".into()));
    }
    if kind == FusionKind::TextOnly && freeze.speech_encoder && !freeze.text_encoder {
        return Err(Error::Usage("freezing the speech encoder has no effect on a text-only model".into()));
    }
    Ok(())
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: FusionKind,
    pub frozen: bool,
}

impl AblationRow {
    /// Fine-tuned shallow and co-attention, both unimodal baselines, then the
    /// frozen-encoder variants of the two bimodal heads.
    pub const GRID: [AblationRow; 6] = [
        AblationRow { kind: FusionKind::Shallow, frozen: false },
        AblationRow { kind: FusionKind::CoAttention, frozen: false },
        AblationRow { kind: FusionKind::SpeechOnly, frozen: false },
        AblationRow { kind: FusionKind::TextOnly, frozen: false },
        AblationRow { kind: FusionKind::Shallow, frozen: true },
        AblationRow { kind: FusionKind::CoAttention, frozen: true },
    ];

    pub fn name(&self) -> String {
        match (self.kind, self.frozen) {
            (FusionKind::SpeechOnly | FusionKind::TextOnly, false) => self.kind.name().to_string(),
            (k, false) => format!("{}-ft", k.name()),
            (k, true) => format!("{}-frozen", k.name()),
        }
    }

    pub fn freeze(&self) -> Freeze {
        if self.frozen {
            Freeze::parse("both").expect("valid literal")
        } else {
            Freeze::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub row: AblationRow,
    pub seed: u64,
    pub report: FinetuneReport,
    pub test: Evaluation,
}

/// Fine-tunes one grid cell starting from the given encoders.
pub fn run_cell(
    splits: &PreparedSplits,
    speech: &EncoderState,
    text: &EncoderState,
    row: AblationRow,
    cfg: &PipelineConfig,
) -> Result<(FusedModel, CellResult)> {
    let mut ft = cfg.finetune.clone();
    ft.train.freeze = row.freeze();
    ft.train.seed = derive_seed(cfg.seed, &[5]);
    let mut model = build_model(speech.clone(), text.clone(), row.kind, splits.mode, cfg)?;
    let report = run_finetune(&mut model, &splits.train, &splits.valid, &ft, &mut |_| {})?;
    let test_split = if splits.test.is_empty() { &splits.valid } else { &splits.test };
    let test = model.evaluate(test_split)?;
    Ok((
        model,
        CellResult {
            row,
            seed: cfg.seed,
            report,
            test,
        },
    ))
}

/// Pretrains both encoders on the training split when `pretrain.total_steps`
/// is positive; otherwise returns them as initialized.
pub fn prepare_encoders(
    splits: &PreparedSplits,
    pre: &Preprocessor,
    cfg: &PipelineConfig,
) -> Result<(EncoderState, EncoderState, Vec<StepRecord>, Vec<StepRecord>)> {
    let (mut speech, mut text) = init_encoders(pre, cfg)?;
    if cfg.pretrain.total_steps == 0 {
        return Ok((speech, text, Vec::new(), Vec::new()));
    }
    let mut pc = cfg.pretrain.clone();
    pc.train.seed = derive_seed(cfg.seed, &[6]);
    pc.prefix = "speech.".into();
    let s_curve = pretrain_encoder(&mut speech, &splits.speech_corpus(), &pc, &mut |_, _, _| Ok(()))?;
    pc.train.seed = derive_seed(cfg.seed, &[7]);
    pc.prefix = "text.".into();
    let t_curve = pretrain_encoder(&mut text, &splits.text_corpus(), &pc, &mut |_, _, _| Ok(()))?;
    Ok((speech, text, s_curve, t_curve))
}
