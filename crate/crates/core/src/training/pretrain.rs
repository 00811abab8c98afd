use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{mask_corrupt, EncoderState};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Tape, Tensor};
use crate::tokens::{is_special, TokenSequence};

use super::optim::{adam_step, clip_global_norm, OptimizerState, ParamGroup};
use super::{lr_at, StepRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub total_steps: usize,
    pub mask_rate: f64,
    /// Draw fresh corruptions every step; when false each sequence keeps one
    /// fixed corruption for the whole run.
    pub resample_masks: bool,
    /// Optimizer-state key prefix for the encoder parameters.
    pub prefix: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                peak_lr: 1e-4,
                ..TrainConfig::default()
            },
            total_steps: 1000,
            mask_rate: 0.15,
            resample_masks: true,
            prefix: "speech.".into(),
        }
    }
}

/// Corpus index of the `j`-th example of update `step` (0-based): the corpus
/// is visited in a fresh seeded permutation every pass.
fn corpus_index(seed: u64, n: usize, batch: usize, step: usize, j: usize, cache: &mut Option<(usize, Vec<usize>)>) -> usize {
    let global = step * batch + j;
    let pass = global / n;
    if cache.as_ref().map(|c| c.0) != Some(pass) {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut seeded(derive_seed(seed, &[10, pass as u64])));
        *cache = Some((pass, perm));
    }
    cache.as_ref().expect("filled above").1[global % n]
}

/// Masked-token pretraining of `encoder` on `corpus`.
///
/// Continues from `opt.step()` up to `cfg.total_steps`, so a run restored
/// from a checkpoint resumes where it stopped. `on_step` sees every update
/// after it is applied.
pub fn run_pretraining(
    corpus: &[TokenSequence],
    encoder: &mut EncoderState,
    cfg: &PretrainConfig,
    opt: &mut OptimizerState,
    on_step: &mut dyn FnMut(&StepRecord, &EncoderState, &OptimizerState) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    if let Some(i) = corpus.iter().position(|s| s.body().iter().all(|&t| is_special(t))) {
        return Err(Error::Input(format!("corpus sequence {i} has no maskable tokens")));
    }
    for s in corpus {
        encoder.check_sequence(s)?;
    }
    let schedule = cfg.train.schedule(cfg.total_steps)?;
    encoder.set_dropout(cfg.train.dropout)?;
    let seed = cfg.train.seed;
    let batch = cfg.train.batch_size;
    let vocab = encoder.config().vocab_size;
    let mut perm_cache = None;
    let mut records = Vec::new();

    let first = opt.step() as usize;
    if first > cfg.total_steps {
        return Err(Error::Usage(format!(
            "optimizer is at step {first}, past the configured {} steps",
            cfg.total_steps
        )));
    }
    for step in first..cfg.total_steps {
        let mut acc: Vec<Tensor> = encoder.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        for j in 0..batch {
            let idx = corpus_index(seed, corpus.len(), batch, step, j, &mut perm_cache);
            let mask_seed = if cfg.resample_masks {
                derive_seed(seed, &[11, step as u64, j as u64])
            } else {
                derive_seed(seed, &[11, u64::MAX, idx as u64])
            };
            let example = mask_corrupt(&corpus[idx], cfg.mask_rate, vocab, &mut seeded(mask_seed))?;
            let mut drop_rng = seeded(derive_seed(seed, &[12, step as u64, j as u64]));
            let mut tape = Tape::new();
            let bound = encoder.params().bind(&mut tape, true);
            let loss = encoder.masked_lm_loss(&mut tape, &bound, &example, Some(&mut drop_rng))?;
            loss_sum += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            for (a, g) in acc.iter_mut().zip(bound.gradients(encoder.params(), &grads)) {
                a.add_assign(&g);
            }
        }
        let inv = 1.0 / batch as f64;
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        if let Some(c) = cfg.train.grad_clip {
            clip_global_norm(&mut [&mut acc[..]], c);
        }
        let lr = lr_at(step + 1, &schedule)?;
        adam_step(
            &mut [ParamGroup {
                prefix: &cfg.prefix,
                params: encoder.params_mut(),
                grads: &acc,
            }],
            opt,
            lr,
        )?;
        let rec = StepRecord {
            step: step + 1,
            lr,
            loss: loss_sum * inv,
        };
        if !rec.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", rec.step)));
        }
        on_step(&rec, encoder, opt)?;
        records.push(rec);
    }
    Ok(records)
}
