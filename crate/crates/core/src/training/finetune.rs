use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMode, EMOTIONS};
use crate::error::{Error, Result};
use crate::model::{EncoderCache, Evaluation, FusedModel, PreparedExample, SPEECH_PREFIX, TEXT_PREFIX};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Tape, Tensor};

use super::optim::{adam_step, clip_global_norm, OptimizerState, ParamGroup};
use super::{lr_at, StepRecord, TrainConfig};

const FUSION_PREFIX: &str = "fusion.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub epochs: usize,
    /// Also score the training split after every epoch.
    pub eval_train: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            epochs: 10,
            eval_train: true,
        }
    }
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub steps: Vec<StepRecord>,
    pub history: Vec<HistoryRow>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub selection_metric: String,
    pub best_value: f64,
}

impl FinetuneReport {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.metric, r.value));
        }
        out
    }
}

/// Summed-then-averaged gradients of one effective batch, per component.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    pub speech: Option<Vec<Tensor>>,
    pub text: Option<Vec<Tensor>>,
    pub fusion: Vec<Tensor>,
}

fn zeros_like(store: &crate::params::ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
}

fn accumulate(acc: &mut [Tensor], grads: Vec<Tensor>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_assign(&g);
    }
}

fn trainable(model: &FusedModel, cfg: &TrainConfig) -> (bool, bool) {
    (
        model.uses_speech() && !cfg.freeze.speech_encoder,
        model.uses_text() && !cfg.freeze.text_encoder,
    )
}

fn batch_gradients_cached(
    model: &FusedModel,
    examples: &[PreparedExample],
    indices: &[usize],
    cache: &EncoderCache,
    cfg: &TrainConfig,
    step: usize,
) -> Result<BatchGradients> {
    let (train_s, train_t) = trainable(model, cfg);
    let mut acc_s = train_s.then(|| zeros_like(model.speech.params()));
    let mut acc_t = train_t.then(|| zeros_like(model.text.params()));
    let mut acc_f = zeros_like(model.fusion.params());
    let mut loss_sum = 0.0;
    for (m, micro) in indices.chunks(cfg.micro_batch()).enumerate() {
        for (jj, &i) in micro.iter().enumerate() {
            let j = m * cfg.micro_batch() + jj;
            let ex = &examples[i];
            let mut rng = seeded(derive_seed(cfg.seed, &[21, step as u64, j as u64]));
            let mut tape = Tape::new();
            let sb = train_s.then(|| model.speech.params().bind(&mut tape, true));
            let tb = train_t.then(|| model.text.params().bind(&mut tape, true));
            let fb = model.fusion.params().bind(&mut tape, true);
            let trace = model.forward_with(
                &mut tape,
                ex,
                sb.as_ref(),
                tb.as_ref(),
                &fb,
                (cache.speech_at(i), cache.text_at(i)),
                Some(&mut rng),
            )?;
            let loss = model.loss(&mut tape, &trace, ex.label)?;
            loss_sum += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            if let (Some(acc), Some(b)) = (acc_s.as_mut(), sb.as_ref()) {
                accumulate(acc, b.gradients(model.speech.params(), &grads));
            }
            if let (Some(acc), Some(b)) = (acc_t.as_mut(), tb.as_ref()) {
                accumulate(acc, b.gradients(model.text.params(), &grads));
            }
            accumulate(&mut acc_f, fb.gradients(model.fusion.params(), &grads));
        }
    }
    let inv = 1.0 / indices.len() as f64;
    for t in acc_s.iter_mut().chain(acc_t.iter_mut()).flatten().chain(acc_f.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(BatchGradients {
        loss: loss_sum * inv,
        speech: acc_s,
        text: acc_t,
        fusion: acc_f,
    })
}

/// Mean gradient of the training loss over `batch`, processed in
/// `cfg.accumulation` sequential micro-batches. `step` seeds dropout.
pub fn batch_gradients(model: &FusedModel, batch: &[PreparedExample], cfg: &TrainConfig, step: usize) -> Result<BatchGradients> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let (train_s, train_t) = trainable(model, cfg);
    let cache = EncoderCache::build(model, batch, !train_s, !train_t)?;
    let indices: Vec<usize> = (0..batch.len()).collect();
    batch_gradients_cached(model, batch, &indices, &cache, cfg, step)
}

fn selection(mode: LabelMode, eval: &Evaluation) -> (&'static str, f64, bool) {
    match mode {
        LabelMode::Categorical4 => ("accuracy", eval.report.accuracy, true),
        LabelMode::Score => ("mae", eval.report.mae.unwrap_or(f64::INFINITY), false),
    }
}

fn push_eval(history: &mut Vec<HistoryRow>, epoch: usize, split: &str, eval: &Evaluation) {
    history.push(HistoryRow {
        epoch,
        split: split.into(),
        metric: "loss".into(),
        value: eval.loss,
    });
    for (metric, value) in eval.report.entries(&EMOTIONS) {
        history.push(HistoryRow {
            epoch,
            split: split.into(),
            metric,
            value,
        });
    }
}

/// Supervised training of `model` with per-epoch validation.
///
/// Frozen or unused encoders are excluded from the optimizer and evaluated
/// once. After the last epoch `model` holds the parameters of the epoch with
/// the best validation score (validation accuracy, or lowest MAE for
/// scores; the training split stands in when `valid` is empty).
pub fn run_finetune(
    model: &mut FusedModel,
    train: &[PreparedExample],
    valid: &[PreparedExample],
    cfg: &FinetuneConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<FinetuneReport> {
    let tc = &cfg.train;
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Input("fine-tuning dataset is empty".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    model.speech.set_dropout(tc.dropout)?;
    model.text.set_dropout(tc.dropout)?;
    model.fusion.set_dropout(tc.dropout)?;

    let batches_per_epoch = train.len().div_ceil(tc.batch_size);
    let schedule = tc.schedule(cfg.epochs * batches_per_epoch)?;
    let (train_s, train_t) = trainable(model, tc);
    let train_cache = EncoderCache::build(model, train, !train_s, !train_t)?;
    let valid_cache = EncoderCache::build(model, valid, !train_s, !train_t)?;
    let mut opt = OptimizerState::new(tc.adam);
    let mut steps = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, FusedModel)> = None;
    let mut selection_metric = String::new();

    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded(derive_seed(tc.seed, &[20, epoch as u64])));
        for batch in order.chunks(tc.batch_size) {
            let mut g = batch_gradients_cached(model, train, batch, &train_cache, tc, step)?;
            if !g.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", step + 1)));
            }
            if let Some(c) = tc.grad_clip {
                let mut parts: Vec<&mut [Tensor]> = Vec::new();
                if let Some(s) = g.speech.as_mut() {
                    parts.push(s);
                }
                if let Some(t) = g.text.as_mut() {
                    parts.push(t);
                }
                parts.push(&mut g.fusion);
                clip_global_norm(&mut parts, c);
            }
            let lr = lr_at(step + 1, &schedule)?;
            {
                let FusedModel { speech, text, fusion, .. } = model;
                let mut groups = Vec::new();
                if let Some(gs) = g.speech.as_deref() {
                    groups.push(ParamGroup { prefix: SPEECH_PREFIX, params: speech.params_mut(), grads: gs });
                }
                if let Some(gt) = g.text.as_deref() {
                    groups.push(ParamGroup { prefix: TEXT_PREFIX, params: text.params_mut(), grads: gt });
                }
                groups.push(ParamGroup { prefix: FUSION_PREFIX, params: fusion.params_mut(), grads: &g.fusion });
                adam_step(&mut groups, &mut opt, lr)?;
            }
            step += 1;
            let rec = StepRecord { step, lr, loss: g.loss };
            on_step(&rec);
            steps.push(rec);
        }

        let train_eval = if cfg.eval_train || valid.is_empty() {
            let e = model.evaluate_cached(train, &train_cache)?;
            push_eval(&mut history, epoch, "train", &e);
            Some(e)
        } else {
            None
        };
        let sel_eval = if valid.is_empty() {
            train_eval.expect("computed when valid is empty")
        } else {
            let e = model.evaluate_cached(valid, &valid_cache)?;
            push_eval(&mut history, epoch, "valid", &e);
            e
        };
        let (name, value, higher) = selection(model.mode, &sel_eval);
        selection_metric = format!("{}_{name}", if valid.is_empty() { "train" } else { "valid" });
        let improved = match &best {
            None => true,
            Some((_, b, _)) => (higher && value > *b) || (!higher && value < *b),
        };
        if improved {
            best = Some((epoch, value, model.clone()));
        }
    }
    let (best_epoch, best_value, best_model) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(FinetuneReport {
        steps,
        history,
        best_epoch,
        selection_metric,
        best_value,
    })
}
