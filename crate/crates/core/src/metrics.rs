//! Regression and classification metrics for sentiment scores.
//!
//! * Acc-2 / F1 *has-0*: negative (`< 0`) against non-negative (`>= 0`) over
//!   all samples.
//! * Acc-2 / F1 *non-0*: samples with `y == 0` are dropped, then negative
//!   against positive (`> 0`).
//! * Acc-k: scores in `[-b, b]` map to class
//!   `clamp(round((s + b) / (2b) · (k - 1)), 0, k - 1)`, rounding halves up.
//! * F1 is the support-weighted mean of the two per-class F1 scores.

use serde::{Deserialize, Serialize};

use crate::data::LabelRange;
use crate::error::{KudaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub mae: f64,
    pub corr: f64,
    /// Set when either input has zero variance; `corr` is then 0.
    pub corr_undefined: bool,
    pub acc2_has0: f64,
    pub f1_has0: f64,
    pub acc2_non0: f64,
    pub f1_non0: f64,
    /// Samples left after dropping `y == 0`.
    pub samples_non0: usize,
    pub acc3: f64,
    pub acc5: f64,
    pub acc7: f64,
}

pub fn acc_class(score: f64, range: LabelRange, k: usize) -> usize {
    let b = range.bound();
    let x = ((score + b) / (2.0 * b) * (k - 1) as f64).round();
    x.clamp(0.0, (k - 1) as f64) as usize
}

pub fn compute_metrics(y_hat: &[f64], y: &[f64], range: LabelRange) -> Result<MetricReport> {
    if y_hat.len() != y.len() {
        return Err(KudaError::LengthMismatch(y_hat.len(), y.len()));
    }
    if y.is_empty() {
        return Err(KudaError::EmptyBatch);
    }
    if y_hat.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(KudaError::NonFinite("metric inputs".into()));
    }
    let n = y.len() as f64;
    let mae = y_hat.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let (corr, corr_undefined) = pearson(y_hat, y);

    let has0: Vec<(bool, bool)> = y_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| (p >= 0.0, t >= 0.0))
        .collect();
    let non0: Vec<(bool, bool)> = y_hat
        .iter()
        .zip(y)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| (p > 0.0, t > 0.0))
        .collect();
    let acc_k = |k| {
        let hits = y_hat
            .iter()
            .zip(y)
            .filter(|(&p, &t)| acc_class(p, range, k) == acc_class(t, range, k))
            .count();
        hits as f64 / n
    };
    Ok(MetricReport {
        samples: y.len(),
        mae,
        corr,
        corr_undefined,
        acc2_has0: binary_accuracy(&has0),
        f1_has0: weighted_f1(&has0),
        acc2_non0: binary_accuracy(&non0),
        f1_non0: weighted_f1(&non0),
        samples_non0: non0.len(),
        acc3: acc_k(3),
        acc5: acc_k(5),
        acc7: acc_k(7),
    })
}

fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return (0.0, true);
    }
    ((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0), false)
}

/// Pairs are `(predicted positive, truly positive)`.
fn binary_accuracy(pairs: &[(bool, bool)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(p, t)| p == t).count() as f64 / pairs.len() as f64
}

fn weighted_f1(pairs: &[(bool, bool)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in [false, true] {
        let tp = pairs
            .iter()
            .filter(|&&(p, t)| p == class && t == class)
            .count() as f64;
        let predicted = pairs.iter().filter(|&&(p, _)| p == class).count() as f64;
        let support = pairs.iter().filter(|&&(_, t)| t == class).count() as f64;
        let f1 = if predicted + support == 0.0 {
            0.0
        } else {
            2.0 * tp / (predicted + support)
        };
        total += f1 * support;
    }
    total / pairs.len() as f64
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let rows = [
            ("MAE", self.mae),
            ("Corr", self.corr),
            ("Acc-2 (has-0)", self.acc2_has0),
            ("F1 (has-0)", self.f1_has0),
            ("Acc-2 (non-0)", self.acc2_non0),
            ("F1 (non-0)", self.f1_non0),
            ("Acc-3", self.acc3),
            ("Acc-5", self.acc5),
            ("Acc-7", self.acc7),
        ];
        let mut out = format!("{:<14}  {:>8}\n", "samples", self.samples);
        for (name, v) in rows {
            out.push_str(&format!("{name:<14}  {v:>8.4}\n"));
        }
        if self.corr_undefined {
            out.push_str("warning: zero variance input, correlation reported as 0\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let y = [-0.9, -0.3, 0.0, 0.4, 1.0];
        let r = compute_metrics(&y, &y, LabelRange::UNIT).unwrap();
        assert_eq!(r.mae, 0.0);
        assert!((r.corr - 1.0).abs() < 1e-12);
        for v in [
            r.acc2_has0,
            r.acc2_non0,
            r.f1_has0,
            r.f1_non0,
            r.acc3,
            r.acc5,
            r.acc7,
        ] {
            assert_eq!(v, 1.0);
        }
        assert_eq!(r.samples_non0, 4);
    }

    #[test]
    fn negated_predictor() {
        let y = [-0.5, 0.25, 0.5, -0.25];
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let r = compute_metrics(&neg, &y, LabelRange::UNIT).unwrap();
        assert!((r.corr + 1.0).abs() < 1e-12);
    }

    #[test]
    fn binning_examples() {
        assert_eq!(acc_class(2.6, LabelRange::TRIPLE, 7), 6);
        assert_eq!(acc_class(0.0, LabelRange::UNIT, 5), 2);
        assert_eq!(acc_class(-7.0, LabelRange::TRIPLE, 7), 0);
        assert_eq!(acc_class(0.5, LabelRange::TRIPLE, 7), 4);
    }

    #[test]
    fn constant_input_flags_corr() {
        let r = compute_metrics(&[0.1, 0.1], &[0.2, -0.3], LabelRange::UNIT).unwrap();
        assert_eq!(r.corr, 0.0);
        assert!(r.corr_undefined);
    }

    #[test]
    fn zero_truth_in_has0_but_not_non0() {
        let r = compute_metrics(&[0.5, -0.5], &[0.0, -0.5], LabelRange::UNIT).unwrap();
        assert_eq!(r.acc2_has0, 1.0);
        assert_eq!(r.samples_non0, 1);
        assert_eq!(r.acc2_non0, 1.0);
    }
}
