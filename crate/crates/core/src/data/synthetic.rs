//! Seeded synthetic bimodal emotion data with known Bayes rates.
//!
//! Each example has a label `y` and two latent factors. With flip
//! probability `p`:
//!
//! * speech factor `s = y` with probability `1 - p`, else `(y + 1) mod 4`
//! * text factor `t = y` with probability `1 - p`, else `(y + 2) mod 4`
//!
//! drawn independently. Observing `s` alone identifies `y` with probability
//! `1 - p`, as does `t` alone; the pair `(s, t)` identifies `y` exactly
//! because the two corruption offsets differ. The speech factor sets the
//! pitch of a harmonic tone (with jitter, random level, tremolo and noise);
//! the text factor picks the emotional keyword of a templated sentence.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, SeededRng};

use super::{Dataset, Label, LabelMode, LabeledExample, Speech, Split, N_EMOTIONS};

/// Fundamental frequency (Hz) per speech factor.
pub const SPEECH_PITCH_HZ: [f64; N_EMOTIONS] = [180.0, 300.0, 500.0, 840.0];

/// Sentiment level per emotion for score-mode datasets.
pub const SCORE_LEVELS: [f64; N_EMOTIONS] = [2.0, -1.5, -2.5, 0.0];

const KEYWORDS: [[&str; 3]; N_EMOTIONS] = [
    ["happy", "glad", "cheerful"],
    ["sad", "gloomy", "unhappy"],
    ["angry", "furious", "annoyed"],
    ["calm", "fine", "okay"],
];
const TOPICS: [&str; 8] = [
    "meeting", "weather", "game", "news", "trip", "dinner", "movie", "call",
];
const TEMPLATES: [&str; 5] = [
    "i feel {kw} about the {topic}",
    "the {topic} made me {kw} today",
    "honestly i am {kw} right now",
    "we were {kw} after the {topic}",
    "that {topic} left everyone {kw}",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_examples: usize,
    pub seed: u64,
    pub mode: LabelMode,
    pub flip_prob: f64,
    pub n_samples: usize,
    pub sample_rate: u32,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_examples: 400,
            seed: 0,
            mode: LabelMode::Categorical4,
            flip_prob: 0.25,
            n_samples: 4800,
            sample_rate: 16_000,
            noise_std: 0.01,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples < 40 {
            return Err(Error::Input(format!(
                "synthetic dataset needs at least 40 examples, got {}",
                self.n_examples
            )));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob must lie in [0, 0.5), got {}",
                self.flip_prob
            )));
        }
        if self.n_samples == 0 || self.sample_rate == 0 {
            return Err(Error::Config("n_samples and sample_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Latent variables of one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Factors {
    pub label: usize,
    pub speech: usize,
    pub text: usize,
}

pub fn sample_factors(label: usize, flip_prob: f64, rng: &mut impl Rng) -> Factors {
    let speech_flip = rng.random::<f64>() < flip_prob;
    let text_flip = rng.random::<f64>() < flip_prob;
    Factors {
        label,
        speech: (label + usize::from(speech_flip)) % N_EMOTIONS,
        text: (label + 2 * usize::from(text_flip)) % N_EMOTIONS,
    }
}

/// Closed-form accuracies of the Bayes-optimal classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BayesRates {
    pub speech_only: f64,
    pub text_only: f64,
    pub bimodal: f64,
    pub majority: f64,
}

pub fn bayes_rates(flip_prob: f64) -> BayesRates {
    BayesRates {
        speech_only: 1.0 - flip_prob,
        text_only: 1.0 - flip_prob,
        bimodal: 1.0,
        majority: 1.0 / N_EMOTIONS as f64,
    }
}

/// Renders the speech factor as a waveform. Samples are rounded to `f32`
/// precision so they survive a float WAV round trip unchanged.
pub fn render_speech(factor: usize, n_samples: usize, sample_rate: u32, noise_std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let f0 = SPEECH_PITCH_HZ[factor] * (1.0 + rng.random_range(-0.02..0.02));
    let amp = rng.random_range(0.35..0.8);
    let tremolo_hz = rng.random_range(2.0..6.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, noise_std).expect("finite noise std");
    let sr = f64::from(sample_rate);
    (0..n_samples)
        .map(|i| {
            let t = i as f64 / sr;
            let w = std::f64::consts::TAU * f0 * t + phase;
            let env = 1.0 - 0.3 * (0.5 + 0.5 * (std::f64::consts::TAU * tremolo_hz * t).sin());
            let v = amp * env * (w.sin() + 0.3 * (2.0 * w).sin()) / 1.3 + noise.sample(rng);
            (v.clamp(-1.0, 1.0) as f32) as f64
        })
        .collect()
}

pub fn render_text(factor: usize, rng: &mut impl Rng) -> String {
    let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let kw = KEYWORDS[factor][rng.random_range(0..3)];
    let topic = TOPICS[rng.random_range(0..TOPICS.len())];
    template.replace("{kw}", kw).replace("{topic}", topic)
}

fn score_for(label: usize, rng: &mut impl Rng) -> f64 {
    let s = SCORE_LEVELS[label] + rng.random_range(-0.5..0.5);
    (s * 100.0).round() / 100.0
}

/// Generates a dataset whose labels are exactly balanced over the full set
/// (up to `n mod 4`), shuffled, then split 60/20/20 into train/valid/test.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.n_examples).collect();
    order.shuffle(&mut seeded(derive_seed(cfg.seed, &[0])));
    let n_train = cfg.n_examples * 6 / 10;
    let n_valid = cfg.n_examples * 2 / 10;
    let mut examples = Vec::with_capacity(cfg.n_examples);
    for (pos, &i) in order.iter().enumerate() {
        let mut rng: SeededRng = seeded(derive_seed(cfg.seed, &[1, i as u64]));
        let factors = sample_factors(i % N_EMOTIONS, cfg.flip_prob, &mut rng);
        let samples = render_speech(factors.speech, cfg.n_samples, cfg.sample_rate, cfg.noise_std, &mut rng);
        let text = render_text(factors.text, &mut rng);
        let label = match cfg.mode {
            LabelMode::Categorical4 => Label::Class(factors.label),
            LabelMode::Score => Label::Score(score_for(factors.label, &mut rng)),
        };
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
        examples.push(LabeledExample {
            id: format!("syn{i:06}"),
            split,
            speech: Speech::Samples(samples),
            text,
            label,
        });
    }
    Dataset::new(examples, Default::default())
}
