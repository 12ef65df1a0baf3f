//! Regression and class-binned accuracy metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{DcerError, Result};

/// Default sentiment label range.
pub const LABEL_RANGE: (f32, f32) = (-3.0, 3.0);

pub fn mae(pred: &[f32], y: &[f32]) -> f64 {
    assert_eq!(pred.len(), y.len());
    if pred.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(y).map(|(p, t)| (p - t).abs() as f64).sum::<f64>() / pred.len() as f64
}

pub fn pearson(a: &[f32], b: &[f32]) -> Result<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return Err(DcerError::UndefinedCorrelation("fewer than two samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(DcerError::UndefinedCorrelation("constant input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f32]) -> Vec<f32> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0f32; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f32 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f32], b: &[f32]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Two-sided p-value of a correlation under the t approximation.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return f64::NAN;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive dof");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// Class index after clamping to `range` and rounding to the nearest of `k`
/// equally spaced centres spanning it. With `k = 7` over `[−3, 3]` this is
/// integer rounding; with `k = 3` the centre class is neutral.
pub fn bin_class(v: f32, k: usize, range: (f32, f32)) -> usize {
    let (lo, hi) = range;
    let t = (v.clamp(lo, hi) - lo) / (hi - lo);
    ((t * (k - 1) as f32).round() as usize).min(k - 1)
}

pub fn acc_k(pred: &[f32], y: &[f32], k: usize, range: (f32, f32)) -> f64 {
    assert!(k >= 2);
    assert_eq!(pred.len(), y.len());
    if pred.is_empty() {
        return f64::NAN;
    }
    let hits = pred
        .iter()
        .zip(y)
        .filter(|(&p, &t)| bin_class(p, k, range) == bin_class(t, k, range))
        .count();
    hits as f64 / pred.len() as f64
}

/// Binary accuracy and F1 (positive class = positive sentiment) over samples
/// with nonzero labels.
pub fn acc2_f1(pred: &[f32], y: &[f32]) -> (f64, f64) {
    assert_eq!(pred.len(), y.len());
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(y) {
        if t == 0.0 {
            continue;
        }
        match (t > 0.0, p > 0.0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
    }
    let n = tp + tn + fp + fn_;
    let acc = if n == 0 { f64::NAN } else { (tp + tn) as f64 / n as f64 };
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    (acc, f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    /// NaN when undefined (constant predictions or labels).
    pub pearson_corr: f64,
    pub acc7: f64,
    pub acc5: f64,
    pub acc3: f64,
    pub acc2: f64,
    pub f1: f64,
    pub n: usize,
    /// Zero labels are excluded from Acc-2 and F1.
    pub acc2_excludes_zero: bool,
}

impl MetricReport {
    /// `pred` is raw model output; clamping happens inside the binned metrics.
    pub fn compute(pred: &[f32], y: &[f32], range: (f32, f32)) -> Self {
        let (acc2, f1) = acc2_f1(pred, y);
        MetricReport {
            mae: mae(pred, y),
            pearson_corr: pearson(pred, y).unwrap_or(f64::NAN),
            acc7: acc_k(pred, y, 7, range),
            acc5: acc_k(pred, y, 5, range),
            acc3: acc_k(pred, y, 3, range),
            acc2,
            f1,
            n: pred.len(),
            acc2_excludes_zero: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities() {
        let y = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(mae(&y, &y), 0.0);
        assert!((pearson(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        let z = [1.0, -1.0, 2.0, -2.0];
        let neg: Vec<f32> = z.iter().map(|v| -v).collect();
        assert!((pearson(&neg, &z).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[0.0, 2.0]),
            Err(DcerError::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn spearman_is_rank_based() {
        let a = [0.1, 0.5, 0.2, 0.9, 0.3];
        let b: Vec<f32> = a.iter().map(|v: &f32| v.exp() * 10.0 - 4.0).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn binning_hand_cases() {
        assert_eq!(bin_class(2.4, 7, LABEL_RANGE), bin_class(2.4, 7, LABEL_RANGE));
        assert_eq!(bin_class(2.4, 7, LABEL_RANGE), 5);
        assert_eq!(bin_class(0.49, 7, LABEL_RANGE), 3);
        assert_eq!(bin_class(0.51, 7, LABEL_RANGE), 4);
        assert_eq!(bin_class(-0.51, 7, LABEL_RANGE), 2);
        assert_eq!(bin_class(9.0, 7, LABEL_RANGE), 6);
        assert_eq!(bin_class(1.4, 3, LABEL_RANGE), 1);
        assert_eq!(bin_class(1.6, 3, LABEL_RANGE), 2);
        assert_eq!(acc_k(&[2.4], &[2.4], 7, LABEL_RANGE), 1.0);
    }

    #[test]
    fn acc2_and_f1_hand_cases() {
        assert_eq!(acc2_f1(&[2.0, 1.0, 5.0], &[1.0, -1.0, 0.0]).0, 0.5);
        assert_eq!(acc2_f1(&[1.0, -1.0], &[2.0, -2.0]), (1.0, 1.0));
        // TP=2, FP=1, FN=1
        let (_, f1) = acc2_f1(&[1.0, 1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, 1.0]);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn p_value_is_small_for_strong_correlation() {
        assert!(correlation_p_value(0.5, 500) < 1e-10);
        assert!(correlation_p_value(0.0, 500) > 0.99);
    }
}
