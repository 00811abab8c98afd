//! Labeled bimodal examples, their JSONL file format, the synthetic dataset
//! generator and the evaluation metrics.
//!
//! # Dataset file
//!
//! One JSON object per line:
//!
//! ```text
//! {"id": "ex0001", "split": "train", "text": "i feel glad today",
//!  "audio_path": "wav/ex0001.wav", "label": 2}
//! ```
//!
//! * `id` (string, required)
//! * `split` (`"train" | "valid" | "test"`, default `"train"`)
//! * `text` (string, required)
//! * exactly one speech field: `audio_path` (mono WAV, resolved relative to
//!   the dataset file), `frames` (array of equal-length feature rows) or
//!   `samples` (array of raw samples)
//! * exactly one label field: `label` (integer emotion id in `0..4`) or
//!   `score` (real in `[-3, 3]`); all records of a file use the same kind.

pub mod metrics;
pub mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::quantizer::Featurizer;
use crate::tensor::Tensor;

/// Emotion classes of the categorical task, in label-id order.
pub const EMOTIONS: [&str; 4] = ["happy", "sad", "angry", "neutral"];
pub const N_EMOTIONS: usize = EMOTIONS.len();
pub const SCORE_MIN: f64 = -3.0;
pub const SCORE_MAX: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    Categorical4,
    Score,
}

impl LabelMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Categorical4 => "categorical",
            LabelMode::Score => "score",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "categorical" | "categorical-4" => Ok(LabelMode::Categorical4),
            "score" => Ok(LabelMode::Score),
            _ => Err(Error::Usage(format!("unknown label mode {s:?}"))),
        }
    }

    /// Outputs of the prediction head: a (negative, positive) logit pair per
    /// emotion, or one regression output.
    pub fn n_outputs(self) -> usize {
        match self {
            LabelMode::Categorical4 => 2 * N_EMOTIONS,
            LabelMode::Score => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Speech {
    Samples(Vec<f64>),
    Frames(Tensor),
    AudioPath(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn mode(self) -> LabelMode {
        match self {
            Label::Class(_) => LabelMode::Categorical4,
            Label::Score(_) => LabelMode::Score,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub split: Split,
    pub speech: Speech,
    pub text: String,
    pub label: Label,
}

impl LabeledExample {
    /// Frame matrix for this example, featurizing raw audio when needed.
    pub fn frames(&self, featurizer: &Featurizer, base_dir: &Path) -> Result<Tensor> {
        match &self.speech {
            Speech::Frames(f) => {
                if f.cols() != featurizer.config().n_features {
                    return Err(Error::Input(format!(
                        "{}: frames have {} features, featurizer expects {}",
                        self.id,
                        f.cols(),
                        featurizer.config().n_features
                    )));
                }
                Ok(f.clone())
            }
            Speech::Samples(s) => featurizer.featurize(s),
            Speech::AudioPath(p) => {
                let path = base_dir.join(p);
                let samples = read_wav(&path, featurizer.config().sample_rate)?;
                featurizer.featurize(&samples)
            }
        }
    }
}

fn validate_label(label: Label) -> Result<()> {
    match label {
        Label::Class(c) if c >= N_EMOTIONS => {
            Err(Error::Input(format!("label {c} outside 0..{N_EMOTIONS}")))
        }
        Label::Score(s) if !(SCORE_MIN..=SCORE_MAX).contains(&s) => Err(Error::Input(format!(
            "score {s} outside [{SCORE_MIN}, {SCORE_MAX}]"
        ))),
        _ => Ok(()),
    }
}

/// Examples with split designations and a single label kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    /// Directory that relative `audio_path`s resolve against.
    pub base_dir: PathBuf,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, base_dir: PathBuf) -> Result<Self> {
        let ds = Self { examples, base_dir };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for ex in &self.examples {
            validate_label(ex.label)?;
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Input(format!("duplicate example id {}", ex.id)));
            }
        }
        if let Some(first) = self.examples.first() {
            let mode = first.label.mode();
            if let Some(bad) = self.examples.iter().find(|e| e.label.mode() != mode) {
                return Err(Error::Input(format!(
                    "example {} mixes label kinds within one dataset",
                    bad.id
                )));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> Option<LabelMode> {
        self.examples.first().map(|e| e.label.mode())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledExample> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for ex in &self.examples {
            let rec = Record::from_example(ex);
            out.push_str(
                &serde_json::to_string(&rec)
                    .map_err(|e| Error::Input(format!("cannot serialize {}: {e}", ex.id)))?,
            );
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut examples = Vec::new();
        let mut modes = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.display().to_string(),
                line: lineno,
                msg,
            };
            let rec: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let ex = rec.into_example().map_err(err)?;
            validate_label(ex.label).map_err(|e| err(e.to_string()))?;
            match modes {
                None => modes = Some(ex.label.mode()),
                Some(m) if m != ex.label.mode() => {
                    return Err(err("label kind differs from earlier records".into()))
                }
                _ => {}
            }
            examples.push(ex);
        }
        let base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Dataset::new(examples, base_dir)
    }

    /// Reads and validates a JSONL dataset.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    Dataset::load_jsonl(path)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default = "default_split")]
    split: Split,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    audio_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frames: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    samples: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    score: Option<f64>,
}

fn default_split() -> Split {
    Split::Train
}

impl Record {
    fn from_example(ex: &LabeledExample) -> Self {
        let mut rec = Record {
            id: ex.id.clone(),
            split: ex.split,
            text: ex.text.clone(),
            audio_path: None,
            frames: None,
            samples: None,
            label: None,
            score: None,
        };
        match &ex.speech {
            Speech::AudioPath(p) => rec.audio_path = Some(p.clone()),
            Speech::Samples(s) => rec.samples = Some(s.clone()),
            Speech::Frames(f) => {
                rec.frames = Some((0..f.rows()).map(|i| f.row(i).to_vec()).collect())
            }
        }
        match ex.label {
            Label::Class(c) => rec.label = Some(c),
            Label::Score(s) => rec.score = Some(s),
        }
        rec
    }

    fn into_example(self) -> std::result::Result<LabeledExample, String> {
        let speech = match (self.audio_path, self.frames, self.samples) {
            (Some(p), None, None) => Speech::AudioPath(p),
            (None, Some(rows), None) => {
                if rows.is_empty() {
                    return Err("frames must not be empty".into());
                }
                Speech::Frames(Tensor::from_rows(&rows).map_err(|e| e.to_string())?)
            }
            (None, None, Some(s)) => Speech::Samples(s),
            (None, None, None) => return Err("missing speech field (audio_path|frames|samples)".into()),
            _ => return Err("more than one speech field".into()),
        };
        let label = match (self.label, self.score) {
            (Some(c), None) => Label::Class(c),
            (None, Some(s)) => Label::Score(s),
            (None, None) => return Err("missing label field (label|score)".into()),
            _ => return Err("both label and score present".into()),
        };
        Ok(LabeledExample {
            id: self.id,
            split: self.split,
            speech,
            text: self.text,
            label,
        })
    }
}

/// Writes mono 32-bit float PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| Error::format(path, e.to_string()))?;
        for &s in samples {
            w.write_sample(s as f32)
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_atomic(path, &cursor.into_inner())
}

/// Reads a mono WAV file (integer or float PCM) as samples in `[-1, 1]`.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f64>> {
    let mut r = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::format(
            path,
            format!("sample rate {} Hz, expected {expected_rate} Hz", spec.sample_rate),
        ));
    }
    let bad = |e: hound::Error| Error::format(path, e.to_string());
    match spec.sample_format {
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from).map_err(bad))
            .collect(),
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale).map_err(bad))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, label: Label) -> LabeledExample {
        LabeledExample {
            id: id.into(),
            split: Split::Test,
            speech: Speech::Samples(vec![0.25, -0.5]),
            text: "hello there".into(),
            label,
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = Dataset::from_jsonl("", Path::new("d.jsonl")).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.mode(), None);
    }

    #[test]
    fn out_of_range_score_names_line() {
        let text = concat!(
            r#"{"id":"a","text":"x","samples":[0.0],"score":1.0}"#,
            "\n",
            r#"{"id":"b","text":"y","samples":[0.0],"score":4.0}"#,
            "\n"
        );
        match Dataset::from_jsonl(text, Path::new("d.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_field_names_line() {
        let text = r#"{"id":"a","samples":[0.0],"label":1}"#;
        match Dataset::from_jsonl(text, Path::new("d.jsonl")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("text"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_label_kinds_rejected() {
        let text = concat!(
            r#"{"id":"a","text":"x","samples":[0.0],"score":1.0}"#,
            "\n",
            r#"{"id":"b","text":"y","samples":[0.0],"label":1}"#,
        );
        assert!(Dataset::from_jsonl(text, Path::new("d.jsonl")).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut frames_ex = ex("f", Label::Class(3));
        frames_ex.speech = Speech::Frames(Tensor::from_rows(&[vec![0.1, 1e-300], vec![-2.5, 3.0]]).unwrap());
        let mut wav_ex = ex("w", Label::Class(0));
        wav_ex.speech = Speech::AudioPath("wav/w.wav".into());
        wav_ex.split = Split::Valid;
        let ds = Dataset::new(vec![ex("s", Label::Class(1)), frames_ex, wav_ex], PathBuf::new()).unwrap();
        let back = Dataset::from_jsonl(&ds.to_jsonl().unwrap(), Path::new("d.jsonl")).unwrap();
        assert_eq!(back.examples, ds.examples);
    }

    #[test]
    fn wav_round_trip_of_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|i| ((i as f64 * 0.1).sin() as f32) as f64).collect();
        write_wav(&p, &samples, 16_000).unwrap();
        assert_eq!(read_wav(&p, 16_000).unwrap(), samples);
        assert!(read_wav(&p, 8_000).is_err());
    }
}
