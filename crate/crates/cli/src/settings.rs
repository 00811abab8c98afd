//! Every tunable value, its flag, and its default.
//!
//! Values resolve in three layers: built-in defaults, then the `--config`
//! file, then flags given on the command line.
//!
//! Config files hold one `key = value` pair per line; blank lines and lines
//! starting with `#` are skipped. A run manifest (JSON) is also accepted, in
//! which case its `config` object is read.

use std::collections::BTreeMap;
use std::path::Path;

use emofuse::data::synthetic::SyntheticConfig;
use emofuse::data::{LabelMode, Split};
use emofuse::fusion::FusionKind;
use emofuse::pipeline::PipelineConfig;
use emofuse::tokens::Modality;
use emofuse::training::Freeze;
use emofuse::{Error, Result};

/// Subcommand bit masks.
pub const GEN: u8 = 1;
pub const PREPARE: u8 = 2;
pub const PRETRAIN: u8 = 4;
pub const FINETUNE: u8 = 8;
pub const EVALUATE: u8 = 16;
pub const ABLATE: u8 = 32;
const TRAINING: u8 = PRETRAIN | FINETUNE | ABLATE;
const USES_DATA: u8 = PREPARE | PRETRAIN | FINETUNE | EVALUATE | ABLATE;

/// Everything a command may read.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub synthetic: SyntheticConfig,
    pub gen_output: String,
    pub gen_wav: bool,
    pub data: String,
    pub prep_dir: String,
    pub modality: Modality,
    pub resume: bool,
    pub save_every: usize,
    pub fusion: FusionKind,
    pub freeze: Freeze,
    pub speech_ckpt: String,
    pub text_ckpt: String,
    pub require_pretrained: bool,
    pub model: String,
    pub split: Split,
    pub seeds: String,
}

impl Default for Resolved {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            synthetic: SyntheticConfig::default(),
            gen_output: "data.jsonl".into(),
            gen_wav: false,
            data: String::new(),
            prep_dir: String::new(),
            modality: Modality::Speech,
            resume: false,
            save_every: 100,
            fusion: FusionKind::Shallow,
            freeze: Freeze::default(),
            speech_ckpt: String::new(),
            text_ckpt: String::new(),
            require_pretrained: false,
            model: String::new(),
            split: Split::Test,
            seeds: "0,1,2".into(),
        }
    }
}

/// Text form of one setting value.
pub trait Value: Sized {
    fn show(&self) -> String;
    fn read(s: &str) -> Result<Self>;
}

fn bad(s: &str, what: &str) -> Error {
    Error::Usage(format!("'{s}' is not a valid {what}"))
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                format!("{self:?}")
            }
            fn read(s: &str) -> Result<Self> {
                s.parse().map_err(|_| bad(s, stringify!($t)))
            }
        }
    )*};
}

numeric_value!(f64, usize, u64, u32);

impl Value for bool {
    fn show(&self) -> String {
        self.to_string()
    }
    fn read(s: &str) -> Result<Self> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad(s, "boolean")),
        }
    }
}

impl Value for String {
    fn show(&self) -> String {
        self.clone()
    }
    fn read(s: &str) -> Result<Self> {
        Ok(s.to_string())
    }
}

impl<T: Value> Value for Option<T> {
    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), Value::show)
    }
    fn read(s: &str) -> Result<Self> {
        if s == "none" {
            Ok(None)
        } else {
            T::read(s).map(Some)
        }
    }
}

impl Value for FusionKind {
    fn show(&self) -> String {
        self.name().into()
    }
    fn read(s: &str) -> Result<Self> {
        FusionKind::parse(s).map_err(|_| bad(s, "fusion (shallow, coattn, speech-only, text-only)"))
    }
}

impl Value for Freeze {
    fn show(&self) -> String {
        self.name().into()
    }
    fn read(s: &str) -> Result<Self> {
        Freeze::parse(s).map_err(|_| bad(s, "freeze setting (none, speech, text, both)"))
    }
}

impl Value for LabelMode {
    fn show(&self) -> String {
        self.name().into()
    }
    fn read(s: &str) -> Result<Self> {
        LabelMode::parse(s).map_err(|_| bad(s, "label mode (categorical, score)"))
    }
}

impl Value for Split {
    fn show(&self) -> String {
        self.name().into()
    }
    fn read(s: &str) -> Result<Self> {
        Split::parse(s).map_err(|_| bad(s, "split (train, valid, test)"))
    }
}

impl Value for Modality {
    fn show(&self) -> String {
        self.name().into()
    }
    fn read(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(Modality::Speech),
            "text" => Ok(Modality::Text),
            _ => Err(bad(s, "modality (speech, text)")),
        }
    }
}

pub struct Setting {
    pub key: &'static str,
    pub flag: &'static str,
    pub scope: u8,
    pub help: &'static str,
    pub boolean: bool,
    pub get: fn(&Resolved) -> String,
    pub set: fn(&mut Resolved, &str) -> Result<()>,
}

macro_rules! setting {
    ($key:literal, $flag:literal, $scope:expr, $help:literal, $($field:tt).+) => {
        setting!(@ $key, $flag, $scope, $help, false, $($field).+)
    };
    (switch $key:literal, $flag:literal, $scope:expr, $help:literal, $($field:tt).+) => {
        setting!(@ $key, $flag, $scope, $help, true, $($field).+)
    };
    (@ $key:literal, $flag:literal, $scope:expr, $help:literal, $boolean:expr, $($field:tt).+) => {
        Setting {
            key: $key,
            flag: $flag,
            scope: $scope,
            help: $help,
            boolean: $boolean,
            get: |r| Value::show(&r.$($field).+),
            set: |r, v| {
                r.$($field).+ = Value::read(v)?;
                Ok(())
            },
        }
    };
}

pub fn table() -> Vec<Setting> {
    vec![
        setting!("seed", "seed", GEN | TRAINING | PREPARE, "Base random seed", pipeline.seed),
        setting!("data", "data", USES_DATA, "Dataset file (JSONL)", data),
        setting!("gen.n_examples", "n-examples", GEN, "Number of synthetic examples", synthetic.n_examples),
        setting!("gen.mode", "mode", GEN, "Label kind: categorical or score", synthetic.mode),
        setting!("gen.flip_prob", "flip-prob", GEN, "Per-modality cue corruption probability", synthetic.flip_prob),
        setting!("gen.n_samples", "n-samples", GEN, "Audio samples per utterance", synthetic.n_samples),
        setting!("gen.output", "output", GEN, "Dataset file name inside the output directory", gen_output),
        setting!(switch "gen.wav", "wav", GEN, "Write audio as WAV files instead of inline samples", gen_wav),
        setting!("features.sample_rate", "sample-rate", GEN | PREPARE | ABLATE, "Audio sample rate (Hz)", pipeline.featurizer.sample_rate),
        setting!("features.window", "window-length", PREPARE | ABLATE, "Analysis window (samples)", pipeline.featurizer.window_length),
        setting!("features.hop", "hop-length", PREPARE | ABLATE, "Frame hop (samples)", pipeline.featurizer.hop_length),
        setting!("features.n", "n-features", PREPARE | ABLATE, "Mel filters per frame", pipeline.featurizer.n_features),
        setting!("codebook.size", "codebook-size", PREPARE | ABLATE, "Speech codebook entries (K)", pipeline.codebook_size),
        setting!("codebook.max_iters", "kmeans-max-iters", PREPARE | ABLATE, "k-means iteration cap", pipeline.kmeans_max_iters),
        setting!("codebook.tol", "kmeans-tol", PREPARE | ABLATE, "k-means relative convergence tolerance", pipeline.kmeans_tol),
        setting!("vocab.max_size", "vocab-max-size", PREPARE | ABLATE, "Text vocabulary cap, specials included", pipeline.vocab_max_size),
        setting!("speech.max_len", "speech-max-len", PREPARE | ABLATE, "Speech sequence cap, CLS included", pipeline.speech_encoder.max_len),
        setting!("text.max_len", "text-max-len", PREPARE | ABLATE, "Text sequence cap, CLS included", pipeline.text_encoder.max_len),
        setting!("prep_dir", "prep-dir", PRETRAIN | FINETUNE | EVALUATE, "Directory holding prepare outputs (default: output directory)", prep_dir),
        setting!("speech.layers", "speech-layers", TRAINING, "Speech encoder layers", pipeline.speech_encoder.n_layers),
        setting!("speech.d_model", "speech-d-model", TRAINING, "Speech encoder width", pipeline.speech_encoder.d_model),
        setting!("speech.heads", "speech-heads", TRAINING, "Speech encoder attention heads", pipeline.speech_encoder.n_heads),
        setting!("speech.d_ff", "speech-d-ff", TRAINING, "Speech encoder feed-forward width", pipeline.speech_encoder.d_ff),
        setting!("text.layers", "text-layers", TRAINING, "Text encoder layers", pipeline.text_encoder.n_layers),
        setting!("text.d_model", "text-d-model", TRAINING, "Text encoder width", pipeline.text_encoder.d_model),
        setting!("text.heads", "text-heads", TRAINING, "Text encoder attention heads", pipeline.text_encoder.n_heads),
        setting!("text.d_ff", "text-d-ff", TRAINING, "Text encoder feed-forward width", pipeline.text_encoder.d_ff),
        setting!("pretrain.modality", "modality", PRETRAIN, "Encoder to pretrain: speech or text", modality),
        setting!("pretrain.steps", "steps", PRETRAIN | ABLATE, "Pretraining updates (0 skips pretraining in ablate)", pipeline.pretrain.total_steps),
        setting!("pretrain.lr", "pretrain-lr", PRETRAIN | ABLATE, "Pretraining peak learning rate", pipeline.pretrain.train.peak_lr),
        setting!("pretrain.batch_size", "pretrain-batch-size", PRETRAIN | ABLATE, "Sequences per pretraining update", pipeline.pretrain.train.batch_size),
        setting!("pretrain.dropout", "pretrain-dropout", PRETRAIN | ABLATE, "Dropout during pretraining", pipeline.pretrain.train.dropout),
        setting!("pretrain.mask_rate", "mask-rate", PRETRAIN | ABLATE, "Fraction of tokens selected for prediction", pipeline.pretrain.mask_rate),
        setting!("pretrain.warmup_fraction", "pretrain-warmup-fraction", PRETRAIN | ABLATE, "Warm-up share of pretraining steps", pipeline.pretrain.train.warmup_fraction),
        setting!(switch "pretrain.resume", "resume", PRETRAIN, "Continue from the existing checkpoint in the output directory", resume),
        setting!("pretrain.save_every", "save-every", PRETRAIN, "Checkpoint interval (updates)", save_every),
        setting!("finetune.fusion", "fusion", FINETUNE, "Fusion head: shallow, coattn, speech-only or text-only", fusion),
        setting!("finetune.freeze", "freeze", FINETUNE, "Encoders held fixed: none, speech, text or both", freeze),
        setting!("finetune.speech_ckpt", "speech-ckpt", FINETUNE, "Pretrained speech encoder checkpoint", speech_ckpt),
        setting!("finetune.text_ckpt", "text-ckpt", FINETUNE, "Pretrained text encoder checkpoint", text_ckpt),
        setting!(switch "finetune.require_pretrained", "require-pretrained", FINETUNE, "Fail unless every used encoder comes from a checkpoint", require_pretrained),
        setting!("finetune.lr", "lr", FINETUNE | ABLATE, "Fine-tuning peak learning rate", pipeline.finetune.train.peak_lr),
        setting!("finetune.dropout", "dropout", FINETUNE | ABLATE, "Dropout during fine-tuning", pipeline.finetune.train.dropout),
        setting!("finetune.batch_size", "batch-size", FINETUNE | ABLATE, "Effective batch size", pipeline.finetune.train.batch_size),
        setting!("finetune.accumulation", "accumulation", FINETUNE | ABLATE, "Micro-batches per effective batch", pipeline.finetune.train.accumulation),
        setting!("finetune.epochs", "epochs", FINETUNE | ABLATE, "Passes over the training split", pipeline.finetune.epochs),
        setting!("finetune.warmup_fraction", "warmup-fraction", FINETUNE | ABLATE, "Warm-up share of fine-tuning steps", pipeline.finetune.train.warmup_fraction),
        setting!("finetune.end_lr", "end-lr", FINETUNE | ABLATE, "Learning rate at the last step", pipeline.finetune.train.end_lr),
        setting!("finetune.power", "power", FINETUNE | ABLATE, "Polynomial decay power", pipeline.finetune.train.power),
        setting!("finetune.grad_clip", "grad-clip", FINETUNE | ABLATE, "Global gradient-norm cap, or none", pipeline.finetune.train.grad_clip),
        setting!("adam.beta1", "adam-beta1", TRAINING, "Adam first-moment decay", pipeline.finetune.train.adam.beta1),
        setting!("adam.beta2", "adam-beta2", TRAINING, "Adam second-moment decay", pipeline.finetune.train.adam.beta2),
        setting!("adam.eps", "adam-eps", TRAINING, "Adam epsilon", pipeline.finetune.train.adam.eps),
        setting!("fusion.heads", "coattn-heads", FINETUNE | ABLATE, "Heads per co-attention direction", pipeline.coattn_heads),
        setting!("eval.model", "model", EVALUATE, "Model checkpoint (default: model.ckpt in the output directory)", model),
        setting!("eval.split", "split", EVALUATE, "Split to score", split),
        setting!("ablate.seeds", "seeds", ABLATE, "Comma-separated repetition seeds", seeds),
    ]
}

/// `key = value` pairs from a config file or manifest.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let obj = v
            .get("config")
            .and_then(|c| c.as_object())
            .ok_or_else(|| Error::Input(format!("{}: no \"config\" object", path.display())))?;
        return obj
            .iter()
            .map(|(k, v)| match v.as_str() {
                Some(s) => Ok((k.clone(), s.to_string())),
                None => Err(Error::Input(format!("{}: value of {k} is not a string", path.display()))),
            })
            .collect();
    }
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected key = value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Applies `pairs` in order; unknown keys are rejected.
pub fn apply(r: &mut Resolved, pairs: &[(String, String)]) -> Result<()> {
    let table = table();
    for (k, v) in pairs {
        let s = table
            .iter()
            .find(|s| s.key == k)
            .ok_or_else(|| Error::Usage(format!("unknown setting '{k}'")))?;
        (s.set)(r, v).map_err(|e| Error::Usage(format!("{k}: {e}")))?;
    }
    sync(r);
    Ok(())
}

/// Keeps values that several components share in step.
fn sync(r: &mut Resolved) {
    let adam = r.pipeline.finetune.train.adam;
    r.pipeline.pretrain.train.adam = adam;
    r.synthetic.seed = r.pipeline.seed;
    r.synthetic.sample_rate = r.pipeline.featurizer.sample_rate;
}

/// Resolved values of every setting in `scope`.
pub fn snapshot(r: &Resolved, scope: u8) -> BTreeMap<String, String> {
    table()
        .into_iter()
        .filter(|s| s.scope & scope != 0)
        .map(|s| (s.key.to_string(), (s.get)(r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_and_flags_are_unique() {
        let t = table();
        for (i, a) in t.iter().enumerate() {
            for b in &t[i + 1..] {
                assert_ne!(a.key, b.key);
                assert_ne!(a.flag, b.flag);
            }
        }
    }

    #[test]
    fn every_default_reads_back() {
        let r = Resolved::default();
        for s in table() {
            let mut copy = r.clone();
            let shown = (s.get)(&r);
            (s.set)(&mut copy, &shown).unwrap();
            assert_eq!((s.get)(&copy), shown, "{}", s.key);
        }
    }

    #[test]
    fn published_defaults() {
        let r = Resolved::default();
        let snap = snapshot(&r, FINETUNE);
        assert_eq!(snap["finetune.lr"], "1e-5");
        assert_eq!(snap["finetune.dropout"], "0.1");
        assert_eq!(snap["finetune.batch_size"], "16");
    }

    #[test]
    fn config_lines_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "# comment\nfinetune.lr = 0.001\n\nseed=4\n").unwrap();
        let pairs: Vec<_> = read_config(&p).unwrap().into_iter().collect();
        let mut r = Resolved::default();
        apply(&mut r, &pairs).unwrap();
        assert_eq!(r.pipeline.finetune.train.peak_lr, 0.001);
        assert_eq!(r.synthetic.seed, 4);
        std::fs::write(&p, "oops\n").unwrap();
        assert!(matches!(read_config(&p), Err(Error::Parse { line: 1, .. })));
        let err = apply(&mut r, &[("no.such".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
