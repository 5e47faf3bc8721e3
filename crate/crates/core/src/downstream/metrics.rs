//! Regression, classification and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth durations below this many minutes are skipped by MAPE.
pub const MAPE_MIN_TRUTH: f64 = 0.5;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Data(format!("metric over {a} predictions and {b} labels")));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let (sum, n) = pred
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t >= MAPE_MIN_TRUTH)
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + ((p - t) / t).abs(), n + 1));
    if n == 0 {
        return Err(Error::Data(format!("every label is below {MAPE_MIN_TRUTH} minutes")));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
}

/// Class 1 is positive. Undefined ratios (no predicted or no true
/// positives) are 0.
pub fn binary_metrics(pred: &[usize], truth: &[usize]) -> Result<BinaryMetrics> {
    same_len(pred.len(), truth.len())?;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    let mut correct = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::Data(format!("binary metric got class {}", p.max(t))));
        }
        match (p, t) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fn_ += 1.0,
            _ => {}
        }
        if p == t {
            correct += 1.0;
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(BinaryMetrics { f1, accuracy: correct / pred.len() as f64, precision })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiClassMetrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Micro-F1 (equal to accuracy for single-label data) and the unweighted
/// mean of per-class F1 over all `num_classes` classes; a class with no
/// support and no predictions counts as 0.
pub fn multiclass_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<MultiClassMetrics> {
    same_len(pred.len(), truth.len())?;
    let mut tp = vec![0.0; num_classes];
    let mut fp = vec![0.0; num_classes];
    let mut fn_ = vec![0.0; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Data(format!("class {} outside {num_classes} classes", p.max(t))));
        }
        if p == t {
            tp[p] += 1.0;
        } else {
            fp[p] += 1.0;
            fn_[t] += 1.0;
        }
    }
    let f1 = |tp: f64, fp: f64, fn_: f64| if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
    let (stp, sfp, sfn) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_f1 = (0..num_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / num_classes as f64;
    Ok(MultiClassMetrics { micro_f1: f1(stp, sfp, sfn), macro_f1 })
}

/// 1-based rank of `target` when `scores` are sorted descending. Ties are
/// broken against the target (equal scores count as ranked above it).
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &x)| j != target && x >= s).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub mean_rank: f64,
    pub hr1: f64,
    pub hr5: f64,
}

pub fn rank_metrics(ranks: &[usize]) -> Result<RankMetrics> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Data("ranks must be non-empty and 1-based".into()));
    }
    let n = ranks.len() as f64;
    let hr = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankMetrics { mean_rank: ranks.iter().sum::<usize>() as f64 / n, hr1: hr(1), hr5: hr(5) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_by_hand() {
        let (p, t) = ([2.0, 4.0], [1.0, 5.0]);
        assert_eq!(mae(&p, &t).unwrap(), 1.0);
        assert_eq!(rmse(&p, &t).unwrap(), 1.0);
        assert!((mape(&p, &t).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn mape_skips_tiny_labels() {
        assert_eq!(mape(&[5.0, 2.0], &[0.1, 1.0]).unwrap(), 1.0);
        assert!(mape(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn binary_confusion_by_hand() {
        // TP=3, FP=1, FN=1, TN=5
        let pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let truth = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
        let m = binary_metrics(&pred, &truth).unwrap();
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.f1 - 0.75).abs() < 1e-15);
        assert!((m.accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let y = [0, 1, 1, 0, 1];
        let b = binary_metrics(&y, &y).unwrap();
        assert_eq!((b.f1, b.accuracy, b.precision), (1.0, 1.0, 1.0));
        let m = multiclass_metrics(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((m.micro_f1, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let m = multiclass_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(multiclass_metrics(&[3], &[0], 3).is_err());
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_of(&[0.9, 0.5, 0.7], 0), 1);
        assert_eq!(rank_of(&[0.9, 0.5, 0.7], 1), 3);
        assert_eq!(rank_of(&[0.5, 0.5], 1), 2);
        let r = rank_metrics(&[1, 3, 7]).unwrap();
        assert!((r.mean_rank - 11.0 / 3.0).abs() < 1e-15);
        assert!(r.hr1 <= r.hr5);
    }
}
