//! Classification and regression metrics.
//!
//! Conventions:
//! * Per-emotion binary accuracy and F1 are one-vs-rest over all items.
//! * F1 is 0 when precision and recall are both 0 (including the case where
//!   the class is never predicted and never gold).
//! * Unweighted accuracy is the mean of per-class recalls over classes that
//!   occur in the gold labels.
//! * `acc7` rounds both sides to the nearest integer (halves away from zero)
//!   and clamps to `[-3, 3]`.
//! * Binary sentiment treats scores `>= 0` as positive.

use crate::error::{Error, Result};

use super::{SCORE_MAX, SCORE_MIN};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("prediction/gold length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Input("metrics need at least one item".into()));
    }
    Ok(())
}

/// One-vs-rest counts for `class`: (tp, fp, fn, tn).
pub fn one_vs_rest(preds: &[usize], golds: &[usize], class: usize) -> Result<(usize, usize, usize, usize)> {
    check_lengths(preds.len(), golds.len())?;
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == class, g == class) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    Ok(c)
}

pub fn binary_accuracy(preds: &[usize], golds: &[usize], class: usize) -> Result<f64> {
    let (tp, _, _, tn) = one_vs_rest(preds, golds, class)?;
    Ok((tp + tn) as f64 / preds.len() as f64)
}

pub fn precision(preds: &[usize], golds: &[usize], class: usize) -> Result<f64> {
    let (tp, fp, _, _) = one_vs_rest(preds, golds, class)?;
    Ok(ratio(tp, tp + fp))
}

pub fn recall(preds: &[usize], golds: &[usize], class: usize) -> Result<f64> {
    let (tp, _, fn_, _) = one_vs_rest(preds, golds, class)?;
    Ok(ratio(tp, tp + fn_))
}

pub fn f1_score(preds: &[usize], golds: &[usize], class: usize) -> Result<f64> {
    let p = precision(preds, golds, class)?;
    let r = recall(preds, golds, class)?;
    Ok(harmonic(p, r))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean per-class recall over the classes present in `golds`.
pub fn unweighted_accuracy(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        if golds.contains(&c) {
            sum += recall(preds, golds, c)?;
            present += 1;
        }
    }
    Ok(sum / present.max(1) as f64)
}

/// Nearest integer (halves away from zero), clamped to `[-3, 3]`.
pub fn score_bin(s: f64) -> i32 {
    s.round().clamp(SCORE_MIN, SCORE_MAX) as i32
}

pub fn acc7(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    if let Some(g) = golds.iter().find(|g| !(SCORE_MIN..=SCORE_MAX).contains(*g)) {
        return Err(Error::Input(format!("gold score {g} outside [-3, 3]")));
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| score_bin(**p) == score_bin(**g))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mae(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let total: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / preds.len() as f64)
}

fn polarity(scores: &[f64]) -> Vec<usize> {
    scores.iter().map(|&s| usize::from(s >= 0.0)).collect()
}

/// 2-class sentiment accuracy (non-negative vs negative).
pub fn binary_sentiment_accuracy(preds: &[f64], golds: &[f64]) -> Result<f64> {
    accuracy(&polarity(preds), &polarity(golds))
}

/// F1 of the non-negative sentiment class.
pub fn binary_sentiment_f1(preds: &[f64], golds: &[f64]) -> Result<f64> {
    f1_score(&polarity(preds), &polarity(golds), 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub binary_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Everything reported for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n_examples: usize,
    /// Per-emotion one-vs-rest metrics (categorical mode).
    pub per_class: Vec<ClassMetrics>,
    /// Plain multi-class accuracy (categorical) or 2-class sentiment accuracy (score).
    pub accuracy: f64,
    pub unweighted_accuracy: Option<f64>,
    pub acc7: Option<f64>,
    pub mae: Option<f64>,
    pub binary_f1: Option<f64>,
}

impl MetricReport {
    pub fn categorical(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Self> {
        let per_class = (0..n_classes)
            .map(|c| {
                Ok(ClassMetrics {
                    binary_accuracy: binary_accuracy(preds, golds, c)?,
                    precision: precision(preds, golds, c)?,
                    recall: recall(preds, golds, c)?,
                    f1: f1_score(preds, golds, c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n_examples: preds.len(),
            per_class,
            accuracy: accuracy(preds, golds)?,
            unweighted_accuracy: Some(unweighted_accuracy(preds, golds, n_classes)?),
            acc7: None,
            mae: None,
            binary_f1: None,
        })
    }

    pub fn scores(preds: &[f64], golds: &[f64]) -> Result<Self> {
        Ok(Self {
            n_examples: preds.len(),
            per_class: Vec::new(),
            accuracy: binary_sentiment_accuracy(preds, golds)?,
            unweighted_accuracy: None,
            acc7: Some(acc7(preds, golds)?),
            mae: Some(mae(preds, golds)?),
            binary_f1: Some(binary_sentiment_f1(preds, golds)?),
        })
    }

    /// Flat `(metric, value)` pairs in a stable order.
    pub fn entries(&self, class_names: &[&str]) -> Vec<(String, f64)> {
        let mut out = vec![("accuracy".to_string(), self.accuracy)];
        if let Some(v) = self.unweighted_accuracy {
            out.push(("unweighted_accuracy".into(), v));
        }
        if let Some(v) = self.acc7 {
            out.push(("acc7".into(), v));
        }
        if let Some(v) = self.mae {
            out.push(("mae".into(), v));
        }
        if let Some(v) = self.binary_f1 {
            out.push(("binary_f1".into(), v));
        }
        for (i, c) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).copied().unwrap_or("class");
            out.push((format!("{name}_ba"), c.binary_accuracy));
            out.push((format!("{name}_f1"), c.f1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_accuracy_examples() {
        let g = [0, 1, 2, 3, 0];
        assert_eq!(binary_accuracy(&g, &g, 0).unwrap(), 1.0);
        // c = 0, "not c" = 1
        assert_eq!(binary_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1], 0).unwrap(), 0.75);
        assert_eq!(binary_accuracy(&[1, 1, 1, 1], &[0, 0, 1, 1], 0).unwrap(), 0.5);
        assert!(binary_accuracy(&[0], &[0, 1], 0).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[2, 1, 2], &[2, 1, 2], 2).unwrap(), 1.0);
        // precision 1, recall 1/2
        let f = f1_score(&[0, 1, 1, 1], &[0, 0, 1, 1], 0).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_score(&[1, 1], &[1, 1], 3).unwrap(), 0.0);
    }

    #[test]
    fn acc7_examples() {
        assert_eq!(acc7(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 1.0);
        assert_eq!(acc7(&[1.4], &[1.0]).unwrap(), 1.0);
        assert_eq!(acc7(&[2.6], &[2.0]).unwrap(), 0.0);
        assert_eq!(acc7(&[-2.5], &[-3.0]).unwrap(), 1.0);
        assert_eq!(acc7(&[7.0], &[3.0]).unwrap(), 1.0);
        assert!(acc7(&[0.0], &[3.5]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.5, 1.0], &[0.5, 1.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        let (p, g) = ([0.3, -1.2, 2.0], [1.0, 0.0, -0.5]);
        let shift = |v: &[f64]| v.iter().map(|x| x + 0.5).collect::<Vec<_>>();
        assert!((mae(&p, &g).unwrap() - mae(&shift(&p), &shift(&g)).unwrap()).abs() < 1e-12);
        assert!(mae(&[1.0], &[]).is_err());
    }

    #[test]
    fn unweighted_accuracy_is_mean_recall() {
        // class 0 recall 1/2, class 1 recall 1
        let ua = unweighted_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1], 4).unwrap();
        assert_eq!(ua, 0.75);
    }
}
