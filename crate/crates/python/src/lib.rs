//! Python bindings: datasets, preprocessing, training, evaluation and metrics.
#![allow(clippy::useless_conversion)] // pyo3 0.22 macro expansion

use std::path::PathBuf;

use emofuse::data::metrics::MetricReport;
use emofuse::data::synthetic::{bayes_rates as rates, generate, SyntheticConfig};
use emofuse::data::{Dataset as CoreDataset, Label, LabelMode, Split, EMOTIONS};
use emofuse::fusion::{FusionConfig, FusionKind};
use emofuse::model::{FusedModel, Prediction, Preprocessor as CorePreprocessor};
use emofuse::persist::Checkpoint;
use emofuse::pipeline::{
    build_model, check_combination, fit_preprocessor, prepare_encoders, PipelineConfig, PreparedSplits,
};
use emofuse::quantizer::discretize;
use emofuse::rng::derive_seed;
use emofuse::tokenizer;
use emofuse::training::{run_finetune, Freeze};
use emofuse::{Error, ErrorCategory};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match (&e, e.category()) {
        (Error::Io { .. }, _) => PyOSError::new_err(e.to_string()),
        (_, ErrorCategory::Numeric) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for emofuse::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport, loss: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    if let Some(l) = loss {
        d.set_item("loss", l)?;
    }
    d.set_item("n_examples", r.n_examples)?;
    for (k, v) in r.entries(&EMOTIONS) {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Labeled speech/text examples with train/valid/test assignments.
#[pyclass(module = "emofuse")]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load_jsonl(&path).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (n_examples=400, seed=0, mode="categorical", flip_prob=0.25))]
    fn synthetic(n_examples: usize, seed: u64, mode: &str, flip_prob: f64) -> PyResult<Self> {
        let mode = match mode {
            "categorical" => LabelMode::Categorical4,
            "score" => LabelMode::Score,
            _ => return Err(PyValueError::new_err(format!("unknown mode {mode:?}"))),
        };
        let cfg = SyntheticConfig { n_examples, seed, mode, flip_prob, ..SyntheticConfig::default() };
        Ok(Self { inner: generate(&cfg).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_jsonl(&path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn mode(&self) -> Option<&'static str> {
        self.inner.mode().map(|m| m.name())
    }

    #[pyo3(signature = (split="train"))]
    fn texts(&self, split: &str) -> PyResult<Vec<String>> {
        let s = Split::parse(split).py()?;
        Ok(self.inner.split(s).into_iter().map(|e| e.text.clone()).collect())
    }

    /// Class indices, or scores for sentiment data.
    #[pyo3(signature = (split="train"))]
    fn labels(&self, py: Python<'_>, split: &str) -> PyResult<Vec<PyObject>> {
        let s = Split::parse(split).py()?;
        Ok(self
            .inner
            .split(s)
            .into_iter()
            .map(|e| match e.label {
                Label::Class(c) => c.into_py(py),
                Label::Score(v) => v.into_py(py),
            })
            .collect())
    }
}

/// Fitted speech codebook and text vocabulary.
#[pyclass(module = "emofuse")]
#[derive(Clone)]
struct Preprocessor {
    inner: CorePreprocessor,
}

#[pymethods]
impl Preprocessor {
    #[getter]
    fn codebook_size(&self) -> usize {
        self.inner.codebook.k()
    }

    #[getter]
    fn speech_vocab_size(&self) -> usize {
        self.inner.codebook.vocab_size()
    }

    #[getter]
    fn text_vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    /// Token IDs for `text`, CLS first.
    fn text_tokens(&self, text: &str) -> Vec<u32> {
        tokenizer::encode(text, &self.inner.vocab, self.inner.text_max_len).ids().to_vec()
    }

    /// Speech token IDs for raw samples at the featurizer's sample rate, CLS first.
    fn speech_tokens(&self, samples: Vec<f64>) -> PyResult<Vec<u32>> {
        let frames = self.inner.featurizer.featurize(&samples).py()?;
        Ok(discretize(&frames, &self.inner.codebook, self.inner.speech_max_len).py()?.ids().to_vec())
    }

    fn save_codebook(&self, path: PathBuf) -> PyResult<()> {
        self.inner.codebook.save(&path).py()
    }

    fn save_vocab(&self, path: PathBuf) -> PyResult<()> {
        self.inner.vocab.save(&path).py()
    }
}

/// Trained encoders plus fusion head.
#[pyclass(module = "emofuse")]
struct Model {
    inner: FusedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).py()?;
        Ok(Self { inner: FusedModel::from_checkpoint(&ck).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(&path).py()
    }

    #[getter]
    fn fusion(&self) -> &'static str {
        self.inner.fusion.kind().name()
    }

    /// Emotion names or scores for one split.
    #[pyo3(signature = (dataset, preprocessor, split="test"))]
    fn predict(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        preprocessor: &Preprocessor,
        split: &str,
    ) -> PyResult<Vec<PyObject>> {
        let examples = preprocessor.inner.prepare_split(&dataset.inner, Split::parse(split).py()?).py()?;
        examples
            .iter()
            .map(|ex| {
                Ok(match self.inner.predict(ex).py()? {
                    Prediction::Class(c) => EMOTIONS[c].into_py(py),
                    Prediction::Score(s) => s.into_py(py),
                })
            })
            .collect()
    }

    #[pyo3(signature = (dataset, preprocessor, split="test"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        preprocessor: &Preprocessor,
        split: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let examples = preprocessor.inner.prepare_split(&dataset.inner, Split::parse(split).py()?).py()?;
        let e = self.inner.evaluate(&examples).py()?;
        report_dict(py, &e.report, Some(e.loss))
    }
}

/// (epoch, split, metric, value) rows.
type History = Vec<(usize, String, String, f64)>;

/// End-to-end settings: tokenization, encoder shapes, pretraining and fine-tuning.
#[pyclass(module = "emofuse")]
struct Pipeline {
    cfg: PipelineConfig,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (
        seed=0, codebook_size=None, layers=None, d_model=None, heads=None,
        epochs=None, lr=None, batch_size=None, pretrain_steps=None, pretrain_lr=None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        codebook_size: Option<usize>,
        layers: Option<usize>,
        d_model: Option<usize>,
        heads: Option<usize>,
        epochs: Option<usize>,
        lr: Option<f64>,
        batch_size: Option<usize>,
        pretrain_steps: Option<usize>,
        pretrain_lr: Option<f64>,
    ) -> Self {
        let mut cfg = PipelineConfig { seed, ..PipelineConfig::default() };
        if let Some(k) = codebook_size {
            cfg.codebook_size = k;
        }
        for enc in [&mut cfg.speech_encoder, &mut cfg.text_encoder] {
            if let Some(n) = layers {
                enc.n_layers = n;
            }
            if let Some(h) = heads {
                enc.n_heads = h;
            }
            if let Some(d) = d_model {
                enc.d_model = d;
                enc.d_ff = 4 * d;
            }
        }
        if let Some(h) = heads {
            cfg.coattn_heads = h;
        }
        if let Some(e) = epochs {
            cfg.finetune.epochs = e;
        }
        if let Some(v) = lr {
            cfg.finetune.train.peak_lr = v;
        }
        if let Some(b) = batch_size {
            cfg.finetune.train.batch_size = b;
        }
        if let Some(s) = pretrain_steps {
            cfg.pretrain.total_steps = s;
        }
        if let Some(v) = pretrain_lr {
            cfg.pretrain.train.peak_lr = v;
        }
        Self { cfg }
    }

    fn prepare(&self, dataset: &Dataset) -> PyResult<Preprocessor> {
        let (inner, _) = fit_preprocessor(&dataset.inner, &self.cfg).py()?;
        Ok(Preprocessor { inner })
    }

    /// Pretrains (when `pretrain_steps` > 0) and fine-tunes one model.
    /// Returns the model and its per-epoch history rows.
    #[pyo3(signature = (dataset, preprocessor, fusion="shallow", freeze="none"))]
    fn train(
        &self,
        dataset: &Dataset,
        preprocessor: &Preprocessor,
        fusion: &str,
        freeze: &str,
    ) -> PyResult<(Model, History)> {
        let kind = FusionKind::parse(fusion).py()?;
        let freeze = Freeze::parse(freeze).py()?;
        check_combination(kind, freeze).py()?;
        let splits = PreparedSplits::new(&dataset.inner, &preprocessor.inner).py()?;
        let (speech, text, _, _) = prepare_encoders(&splits, &preprocessor.inner, &self.cfg).py()?;
        let mut model = build_model(speech, text, kind, splits.mode, &self.cfg).py()?;
        let mut ft = self.cfg.finetune.clone();
        ft.train.freeze = freeze;
        ft.train.seed = derive_seed(self.cfg.seed, &[5]);
        let report = run_finetune(&mut model, &splits.train, &splits.valid, &ft, &mut |_| {}).py()?;
        let history = report.history.into_iter().map(|r| (r.epoch, r.split, r.metric, r.value)).collect();
        Ok((Model { inner: model }, history))
    }
}

/// Categorical metrics over class indices.
#[pyfunction]
#[pyo3(signature = (preds, golds, n_classes=4))]
fn categorical_metrics<'py>(
    py: Python<'py>,
    preds: Vec<usize>,
    golds: Vec<usize>,
    n_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    report_dict(py, &MetricReport::categorical(&preds, &golds, n_classes).py()?, None)
}

/// Sentiment-score metrics: binary accuracy and F1, acc7, MAE.
#[pyfunction]
fn score_metrics<'py>(py: Python<'py>, preds: Vec<f64>, golds: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    report_dict(py, &MetricReport::scores(&preds, &golds).py()?, None)
}

/// (head, co-attention) parameter counts for the given widths.
#[pyfunction]
#[pyo3(signature = (d_speech, d_text, n_outputs=8, n_heads=8))]
fn fusion_param_counts(d_speech: usize, d_text: usize, n_outputs: usize, n_heads: usize) -> PyResult<(usize, usize)> {
    let cfg = FusionConfig {
        kind: FusionKind::CoAttention,
        d_speech,
        d_text,
        n_outputs,
        n_heads,
        dropout: 0.0,
    };
    cfg.validate().py()?;
    Ok((cfg.head_param_count(), cfg.co_attention_param_count()))
}

/// Best achievable accuracies on synthetic data with the given flip probability.
#[pyfunction]
fn bayes_rates<'py>(py: Python<'py>, flip_prob: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = rates(flip_prob);
    let d = PyDict::new_bound(py);
    d.set_item("speech_only", r.speech_only)?;
    d.set_item("text_only", r.text_only)?;
    d.set_item("bimodal", r.bimodal)?;
    d.set_item("majority", r.majority)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "emofuse")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Preprocessor>()?;
    m.add_class::<Model>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(categorical_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(score_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_rates, m)?)?;
    m.add("EMOTIONS", EMOTIONS.to_vec())?;
    Ok(())
}
