use rand::Rng;

use crate::error::{Error, Result};
use crate::tokens::{is_special, TokenSequence, MASK, N_SPECIALS};

/// Share of selected positions replaced by MASK.
pub const MASK_FRACTION: f64 = 0.8;
/// Share of selected positions replaced by a random non-special token.
pub const RANDOM_FRACTION: f64 = 0.1;

/// A corrupted sequence together with what the model must recover.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub corrupted: TokenSequence,
    /// Positions (indices into the full sequence) that carry a loss.
    pub positions: Vec<usize>,
    /// Original IDs at `positions`.
    pub targets: Vec<u32>,
}

/// BERT-style corruption.
///
/// Every non-special position is selected independently with probability
/// `mask_rate`; if nothing is selected one eligible position is drawn
/// uniformly. Each selected position becomes MASK (80%), a uniformly random
/// non-special token (10%), or stays unchanged (10%). CLS is never selected.
pub fn mask_corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedExample> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    if vocab_size <= N_SPECIALS as usize {
        return Err(Error::Config("vocabulary has no ordinary tokens".into()));
    }
    let eligible: Vec<usize> = (1..seq.len())
        .filter(|&i| !is_special(seq.ids()[i]))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Input("no maskable tokens in sequence body".into()));
    }
    let mut positions: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < mask_rate)
        .collect();
    if positions.is_empty() {
        positions.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut corrupted = seq.clone();
    let targets = positions.iter().map(|&p| seq.ids()[p]).collect();
    let ids = corrupted.ids_mut();
    for &p in &positions {
        let r: f64 = rng.random();
        if r < MASK_FRACTION {
            ids[p] = MASK;
        } else if r < MASK_FRACTION + RANDOM_FRACTION {
            ids[p] = rng.random_range(N_SPECIALS..vocab_size as u32);
        }
    }
    Ok(MaskedExample {
        corrupted,
        positions,
        targets,
    })
}
