//! Optimization: learning-rate schedule, Adam, and the masked-LM
//! pretraining and supervised fine-tuning loops.
//!
//! Both loops build one tape per example and sum per-example gradients into
//! a single accumulator in example order, so the result of a step does not
//! depend on how the effective batch is split into micro-batches.

mod finetune;
mod optim;
mod pretrain;

pub use finetune::{
    batch_gradients, run_finetune, BatchGradients, FinetuneConfig, FinetuneReport, HistoryRow,
};
pub use optim::{adam_step, clip_global_norm, AdamConfig, OptimizerState, ParamGroup};
pub use pretrain::{run_pretraining, PretrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which components are excluded from optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Freeze {
    pub speech_encoder: bool,
    pub text_encoder: bool,
    /// The codebook is fitted by k-means, never by gradient; only `true` is valid.
    pub quantizer: bool,
}

impl Default for Freeze {
    fn default() -> Self {
        Self {
            speech_encoder: false,
            text_encoder: false,
            quantizer: true,
        }
    }
}

impl Freeze {
    pub fn parse(s: &str) -> Result<Self> {
        let (speech_encoder, text_encoder) = match s {
            "none" => (false, false),
            "speech" => (true, false),
            "text" => (false, true),
            "both" => (true, true),
            _ => return Err(Error::Usage(format!("unknown freeze setting {s:?}"))),
        };
        Ok(Self {
            speech_encoder,
            text_encoder,
            quantizer: true,
        })
    }

    pub fn name(self) -> &'static str {
        match (self.speech_encoder, self.text_encoder) {
            (false, false) => "none",
            (true, false) => "speech",
            (false, true) => "text",
            (true, true) => "both",
        }
    }
}

/// Learning-rate schedule: linear warm-up to `peak_lr`, then polynomial
/// decay to `end_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub end_lr: f64,
    pub power: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "need warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0 && self.end_lr >= 0.0 && self.power > 0.0) {
            return Err(Error::Config("learning rates must be >= 0 and power > 0".into()));
        }
        Ok(())
    }
}

pub fn lr_at(step: usize, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::Usage(format!(
            "step {step} beyond schedule of {} steps",
            s.total_steps
        )));
    }
    if step < s.warmup_steps {
        return Ok(s.peak_lr * step as f64 / s.warmup_steps as f64);
    }
    let frac = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok((s.peak_lr - s.end_lr) * (1.0 - frac).powf(s.power) + s.end_lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Explicit warm-up length; when absent, `warmup_fraction` of the total.
    pub warmup_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub end_lr: f64,
    pub power: f64,
    /// Effective batch size.
    pub batch_size: usize,
    /// Micro-batches per effective batch; must divide `batch_size`.
    pub accumulation: usize,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub freeze: Freeze,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-5,
            warmup_steps: None,
            warmup_fraction: 0.06,
            end_lr: 0.0,
            power: 1.0,
            batch_size: 16,
            accumulation: 1,
            dropout: 0.1,
            adam: AdamConfig::default(),
            grad_clip: None,
            seed: 0,
            freeze: Freeze::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.accumulation == 0 || !self.batch_size.is_multiple_of(self.accumulation) {
            return Err(Error::Config(format!(
                "accumulation {} must divide batch_size {}",
                self.accumulation, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if !self.freeze.quantizer {
            return Err(Error::Config("the codebook cannot be trained by gradient".into()));
        }
        self.adam.validate()
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.accumulation
    }

    pub fn schedule(&self, total_steps: usize) -> Result<Schedule> {
        let warmup_steps = self
            .warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total_steps as f64).round() as usize);
        let s = Schedule {
            peak_lr: self.peak_lr,
            warmup_steps,
            total_steps,
            end_lr: self.end_lr,
            power: self.power,
        };
        s.validate()?;
        Ok(s)
    }
}

/// One optimizer update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based update number.
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the batch.
    pub loss: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("step={} lr={:.6e} loss={:.6}", self.step, self.lr, self.loss)
    }
}
