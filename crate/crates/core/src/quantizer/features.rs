use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Energy floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFeaturizerConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub n_features: usize,
}

impl Default for FrameFeaturizerConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_length: 400,
            hop_length: 160,
            n_features: 40,
        }
    }
}

impl FrameFeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.window_length {
            return Err(Error::Config(format!(
                "hop_length {} must be in 1..={}",
                self.hop_length, self.window_length
            )));
        }
        if self.n_features == 0 || self.sample_rate == 0 {
            return Err(Error::Config(
                "n_features and sample_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `1 + floor((len - window) / hop)`, or `None` if the signal is too short.
    pub fn n_frames(&self, signal_len: usize) -> Option<usize> {
        (signal_len >= self.window_length)
            .then(|| 1 + (signal_len - self.window_length) / self.hop_length)
    }
}

/// Log mel-filterbank energies.
///
/// Each frame is Hann-windowed (periodic form), zero-padded to the next power
/// of two, and turned into a power spectrum. Triangular filters spaced evenly
/// on the HTK mel scale between 0 Hz and Nyquist pool the spectrum; the output
/// is `ln(max(energy, LOG_FLOOR))`.
#[derive(Clone)]
pub struct Featurizer {
    cfg: FrameFeaturizerConfig,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
}

impl std::fmt::Debug for Featurizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Featurizer")
            .field("cfg", &self.cfg)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl Featurizer {
    pub fn new(cfg: FrameFeaturizerConfig) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.window_length.next_power_of_two();
        let window = (0..cfg.window_length)
            .map(|n| {
                0.5 - 0.5
                    * (2.0 * std::f64::consts::PI * n as f64 / cfg.window_length as f64).cos()
            })
            .collect();

        let n_bins = n_fft / 2 + 1;
        let sr = cfg.sample_rate as f64;
        let top = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..cfg.n_features + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.n_features + 1) as f64))
            .collect();
        let filters = (0..cfg.n_features)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .filter_map(|b| {
                        let f = b as f64 * sr / n_fft as f64;
                        let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
                        (w > 0.0).then_some((b, w))
                    })
                    .collect()
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
            n_fft,
        })
    }

    pub fn config(&self) -> &FrameFeaturizerConfig {
        &self.cfg
    }

    /// Returns a `[T x n_features]` frame matrix.
    pub fn featurize(&self, signal: &[f64]) -> Result<Tensor> {
        let t = self.cfg.n_frames(signal.len()).ok_or_else(|| {
            Error::Input(format!(
                "signal of {} samples is shorter than one window ({})",
                signal.len(),
                self.cfg.window_length
            ))
        })?;
        let nf = self.cfg.n_features;
        let mut out = Vec::with_capacity(t * nf);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for frame in 0..t {
            let start = frame * self.cfg.hop_length;
            for (i, c) in buf.iter_mut().enumerate() {
                let v = if i < self.cfg.window_length {
                    signal[start + i] * self.window[i]
                } else {
                    0.0
                };
                *c = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().map(|&(b, w)| w * power[b]).sum();
                out.push(e.max(LOG_FLOOR).ln());
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite frame feature".into()));
        }
        Tensor::new(vec![t, nf], out)
    }
}

pub fn featurize(signal: &[f64], cfg: &FrameFeaturizerConfig) -> Result<Tensor> {
    Featurizer::new(cfg.clone())?.featurize(signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect()
    }

    fn max_spread(frames: &Tensor) -> Vec<f64> {
        let (t, f) = (frames.shape()[0], frames.shape()[1]);
        (0..f)
            .map(|j| {
                let col: Vec<f64> = (0..t).map(|i| frames.data()[i * f + j]).collect();
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                hi - lo
            })
            .collect()
    }

    #[test]
    fn frame_count_formula() {
        let cfg = FrameFeaturizerConfig {
            window_length: 200,
            hop_length: 100,
            ..Default::default()
        };
        let f = featurize(&vec![0.1; 400], &cfg).unwrap();
        assert_eq!(f.shape(), &[3, 40]);
    }

    #[test]
    fn silence_gives_identical_floor_frames() {
        let f = featurize(&vec![0.0; 4000], &FrameFeaturizerConfig::default()).unwrap();
        assert!(f.data().iter().all(|v| *v == LOG_FLOOR.ln()));
    }

    #[test]
    fn hop_aligned_tone_is_stationary() {
        // 400 Hz advances exactly four periods per 160-sample hop.
        let f = featurize(&tone(400.0, 8000), &FrameFeaturizerConfig::default()).unwrap();
        assert!(max_spread(&f).iter().all(|d| *d < 1e-6));
    }

    #[test]
    fn tone_440_peak_band_is_stationary() {
        // The STFT of a real tone carries a phase-dependent image term, so
        // only the dominant band is tightly constant.
        let f = featurize(&tone(440.0, 8000), &FrameFeaturizerConfig::default()).unwrap();
        let nf = f.shape()[1];
        let peak = (0..nf)
            .max_by(|&a, &b| f.data()[a].total_cmp(&f.data()[b]))
            .unwrap();
        for i in 0..f.shape()[0] {
            let row = f.row(i);
            let argmax = (0..nf).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, peak);
        }
        assert!(max_spread(&f)[peak] < 1e-4);
    }

    #[test]
    fn short_signal_is_rejected() {
        let err = featurize(&[0.0; 399], &FrameFeaturizerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn hop_longer_than_window_is_rejected() {
        let cfg = FrameFeaturizerConfig {
            hop_length: 500,
            ..Default::default()
        };
        assert!(matches!(Featurizer::new(cfg), Err(Error::Config(_))));
    }
}
