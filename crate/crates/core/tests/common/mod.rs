//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

pub mod grad;

use emofuse::data::metrics::{self, MetricReport};
use emofuse::pipeline::{EncoderShape, PipelineConfig};

/// Compact pipeline used by the end-to-end tests.
pub fn small_config(seed: u64, d_model: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.codebook_size = 32;
    let shape = EncoderShape {
        n_layers: 2,
        d_model,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_len: 64,
    };
    cfg.speech_encoder = shape;
    cfg.text_encoder = EncoderShape { max_len: 16, ..shape };
    cfg.coattn_heads = 2;
    cfg.finetune.train.peak_lr = 1e-3;
    cfg.finetune.epochs = 15;
    cfg.pretrain.train.peak_lr = 1e-3;
    cfg.pretrain.total_steps = 0;
    cfg
}

/// Brute-force confusion matrix `m[gold][pred]`.
pub fn confusion(preds: &[usize], golds: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n]; n];
    for (&p, &g) in preds.iter().zip(golds) {
        m[g][p] += 1;
    }
    m
}

/// Nearest of the seven sentiment levels, ties towards the larger magnitude.
pub fn oracle_bin(s: f64) -> i32 {
    let mut best: i32 = -3;
    for c in -3i32..=3 {
        let (d, db) = ((s - c as f64).abs(), (s - best as f64).abs());
        if d < db || (d == db && c.abs() > best.abs()) {
            best = c;
        }
    }
    best
}

fn close(name: &str, got: f64, want: f64, worst: &mut f64) -> Result<(), String> {
    let err = (got - want).abs();
    *worst = worst.max(err);
    if err > 1e-12 {
        return Err(format!("{name}: library {got} vs oracle {want}"));
    }
    Ok(())
}

/// Compares every categorical metric with values read off the confusion
/// matrix. Returns the largest absolute deviation.
pub fn check_categorical(preds: &[usize], golds: &[usize], n: usize) -> Result<f64, String> {
    let m = confusion(preds, golds, n);
    let total = preds.len() as f64;
    let report = MetricReport::categorical(preds, golds, n).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let diag: usize = (0..n).map(|c| m[c][c]).sum();
    close("accuracy", report.accuracy, diag as f64 / total, &mut worst)?;
    let mut recalls = Vec::new();
    for c in 0..n {
        let tp = m[c][c];
        let gold_c: usize = m[c].iter().sum();
        let pred_c: usize = (0..n).map(|g| m[g][c]).sum();
        let (fp, fn_) = (pred_c - tp, gold_c - tp);
        let tn = preds.len() - tp - fp - fn_;
        let ba = (tp + tn) as f64 / total;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let pc = &report.per_class[c];
        close(&format!("ba[{c}]"), pc.binary_accuracy, ba, &mut worst)?;
        close(&format!("f1[{c}]"), pc.f1, f1, &mut worst)?;
        close(&format!("ba_fn[{c}]"), metrics::binary_accuracy(preds, golds, c).unwrap(), ba, &mut worst)?;
        if gold_c > 0 {
            recalls.push(tp as f64 / gold_c as f64);
        }
    }
    let ua = recalls.iter().sum::<f64>() / recalls.len() as f64;
    close("unweighted_accuracy", report.unweighted_accuracy.unwrap(), ua, &mut worst)?;
    Ok(worst)
}

/// Same for the sentiment-score metrics.
pub fn check_scores(preds: &[f64], golds: &[f64]) -> Result<f64, String> {
    let report = MetricReport::scores(preds, golds).map_err(|e| e.to_string())?;
    let total = preds.len() as f64;
    let mut worst = 0.0f64;
    let pb: Vec<usize> = preds.iter().map(|&p| (oracle_bin(p) + 3) as usize).collect();
    let gb: Vec<usize> = golds.iter().map(|&g| (oracle_bin(g) + 3) as usize).collect();
    let m7 = confusion(&pb, &gb, 7);
    let hits: usize = (0..7).map(|c| m7[c][c]).sum();
    close("acc7", report.acc7.unwrap(), hits as f64 / total, &mut worst)?;
    let abs: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum();
    close("mae", report.mae.unwrap(), abs / total, &mut worst)?;
    let pp: Vec<usize> = preds.iter().map(|&p| usize::from(p >= 0.0)).collect();
    let gp: Vec<usize> = golds.iter().map(|&g| usize::from(g >= 0.0)).collect();
    let m2 = confusion(&pp, &gp, 2);
    close("binary_accuracy", report.accuracy, (m2[0][0] + m2[1][1]) as f64 / total, &mut worst)?;
    let (tp, fp, fn_) = (m2[1][1], m2[0][1], m2[1][0]);
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    close("binary_f1", report.binary_f1.unwrap(), f1, &mut worst)?;
    Ok(worst)
}

/// Runs both checks on `n_vectors` random vectors of length 1..=100.
pub fn metric_oracle_sweep(n_vectors: usize, seed: u64) -> Result<f64, String> {
    use rand::Rng;
    let mut rng = emofuse::rng::seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_vectors {
        let len = rng.random_range(1..=100);
        let preds: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let golds: Vec<usize> = (0..len).map(|_| rng.random_range(0..4)).collect();
        worst = worst.max(check_categorical(&preds, &golds, 4)?);
        // quarter steps put some values exactly on bin edges
        let score = |r: &mut emofuse::rng::SeededRng| {
            if r.random_bool(0.3) {
                r.random_range(-14..=14) as f64 * 0.25
            } else {
                r.random_range(-3.0..=3.0)
            }
        };
        let sp: Vec<f64> = (0..len).map(|_| score(&mut rng) * 1.2).collect();
        let sg: Vec<f64> = (0..len).map(|_| score(&mut rng).clamp(-3.0, 3.0)).collect();
        worst = worst.max(check_scores(&sp, &sg)?);
    }
    Ok(worst)
}

/// Standard normal CDF by composite Simpson quadrature of the density.
pub fn simpson_normal_cdf(x: f64) -> f64 {
    let n = 4000;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(i as f64 * h);
    }
    0.5 + s * h / 3.0
}
