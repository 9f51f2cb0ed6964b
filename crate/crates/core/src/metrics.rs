//! Probabilistic and point metrics over evaluation masks, and anomaly
//! detection scoring.
//!
//! Quantiles use linear interpolation between order statistics: for sorted
//! values `v[0..n]`, level `q` maps to position `q * (n - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty set");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

/// Levels `i * gamma` for `i = 1..N` where `gamma * (N + 1) = 1`.
pub fn quantile_levels(gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile tick {gamma} must be in (0, 1)")));
    }
    let slots = (1.0 / gamma).round();
    if (slots * gamma - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "1 / {gamma} must be an integer"
        )));
    }
    let n = slots as usize - 1;
    Ok((1..=n).map(|i| i as f64 * gamma).collect())
}

/// Pinball loss `(1{x < q} - alpha) * (q - x)`.
pub fn quantile_loss(q: f64, x: f64, alpha: f64) -> f64 {
    let ind = if x < q { 1.0 } else { 0.0 };
    (ind - alpha) * (q - x)
}

/// Discretised CRPS of one cell: `(2/N) * sum_i L_{alpha_i}(F^-1(alpha_i), x)`.
pub fn crps_cell(samples: &[f64], truth: f64, levels: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let s: f64 = levels
        .iter()
        .map(|&a| quantile_loss(quantile_sorted(&sorted, a), truth, a))
        .sum();
    2.0 * s / levels.len() as f64
}

/// Checks that per-instance collections line up.
fn check_sets(samples: &[Vec<Matrix>], truth: &[Matrix], eval: &[Matrix]) -> Result<()> {
    if samples.len() != truth.len() || truth.len() != eval.len() {
        return Err(Error::Shape("samples, truth and masks differ in instance count".into()));
    }
    for (i, ((s, x), e)) in samples.iter().zip(truth).zip(eval).enumerate() {
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!("instance {i} has no samples")));
        }
        if x.shape() != e.shape() || s.iter().any(|m| m.shape() != x.shape()) {
            return Err(Error::Shape(format!("instance {i}: shape mismatch")));
        }
    }
    Ok(())
}

fn normaliser(truth: &[Matrix], eval: &[Matrix]) -> Result<f64> {
    let denom: f64 = truth
        .iter()
        .zip(eval)
        .map(|(x, e)| x.as_slice().iter().zip(e.as_slice()).map(|(v, m)| v.abs() * m).sum::<f64>())
        .sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(
            "sum of |truth| over evaluation cells is zero".into(),
        ));
    }
    Ok(denom)
}

/// Dataset CRPS: summed cell scores over `eval` divided by the summed
/// absolute truth over `eval`.
pub fn crps(samples: &[Vec<Matrix>], truth: &[Matrix], eval: &[Matrix], gamma: f64) -> Result<f64> {
    check_sets(samples, truth, eval)?;
    let levels = quantile_levels(gamma)?;
    let denom = normaliser(truth, eval)?;
    let mut num = 0.0;
    let mut cell = Vec::new();
    for ((s, x), e) in samples.iter().zip(truth).zip(eval) {
        let (k, l) = x.shape();
        for r in 0..k {
            for c in 0..l {
                let w = e.get(r, c);
                if w == 0.0 {
                    continue;
                }
                cell.clear();
                cell.extend(s.iter().map(|m| m.get(r, c)));
                num += w * crps_cell(&cell, x.get(r, c), &levels);
            }
        }
    }
    Ok(num / denom)
}

/// CRPS of the feature-summed series at every timestamp holding
/// evaluation cells, normalised by the summed absolute truth.
pub fn crps_sum(samples: &[Vec<Matrix>], truth: &[Matrix], eval: &[Matrix], gamma: f64) -> Result<f64> {
    check_sets(samples, truth, eval)?;
    let levels = quantile_levels(gamma)?;
    let denom = normaliser(truth, eval)?;
    let mut num = 0.0;
    for ((s, x), e) in samples.iter().zip(truth).zip(eval) {
        let (k, l) = x.shape();
        for c in 0..l {
            if (0..k).all(|r| e.get(r, c) == 0.0) {
                continue;
            }
            let total = |m: &Matrix| (0..k).map(|r| m.get(r, c) * e.get(r, c)).sum::<f64>();
            let summed: Vec<f64> = s.iter().map(total).collect();
            num += crps_cell(&summed, total(x), &levels);
        }
    }
    Ok(num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub cells: usize,
}

/// MAE, MSE and RMSE of `pred` against `truth` over the `eval` cells.
pub fn point_metrics(pred: &[Matrix], truth: &[Matrix], eval: &[Matrix]) -> Result<PointMetrics> {
    if pred.len() != truth.len() || truth.len() != eval.len() {
        return Err(Error::Shape("predictions, truth and masks differ in instance count".into()));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for ((p, x), e) in pred.iter().zip(truth).zip(eval) {
        if p.shape() != x.shape() || x.shape() != e.shape() {
            return Err(Error::Shape("prediction shape mismatch".into()));
        }
        for ((a, b), m) in p.as_slice().iter().zip(x.as_slice()).zip(e.as_slice()) {
            if *m != 0.0 {
                let d = a - b;
                abs += d.abs();
                sq += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no evaluation cells".into()));
    }
    let mse = sq / n as f64;
    Ok(PointMetrics {
        mae: abs / n as f64,
        mse,
        rmse: mse.sqrt(),
        cells: n,
    })
}

pub fn mae(pred: &[Matrix], truth: &[Matrix], eval: &[Matrix]) -> Result<f64> {
    point_metrics(pred, truth, eval).map(|p| p.mae)
}

pub fn mse(pred: &[Matrix], truth: &[Matrix], eval: &[Matrix]) -> Result<f64> {
    point_metrics(pred, truth, eval).map(|p| p.mse)
}

pub fn rmse(pred: &[Matrix], truth: &[Matrix], eval: &[Matrix]) -> Result<f64> {
    point_metrics(pred, truth, eval).map(|p| p.rmse)
}

/// Ground-truth availability and model-visible masks; their difference
/// marks the cells scored.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMasks {
    pub m_gt: Matrix,
    pub m: Matrix,
}

impl EvalMasks {
    pub fn new(m_gt: Matrix, m: Matrix) -> Result<Self> {
        if m_gt.shape() != m.shape() {
            return Err(Error::Shape("mask shapes differ".into()));
        }
        let ok = m_gt
            .as_slice()
            .iter()
            .zip(m.as_slice())
            .all(|(&g, &v)| (g == 0.0 || g == 1.0) && (v == 0.0 || v == 1.0) && v <= g);
        if !ok {
            return Err(Error::InvalidArgument(
                "masks must be binary with visible cells a subset of available cells".into(),
            ));
        }
        Ok(Self { m_gt, m })
    }

    pub fn eval(&self) -> Matrix {
        self.m_gt.zip_map(&self.m, |a, b| a - b)
    }
}

/// Threshold flagging a fraction `ratio` of `scores` under the rule
/// `score >= threshold`: the `(1 - ratio)` quantile, or just above the
/// maximum when `ratio == 0`.
pub fn anomaly_threshold(scores: &[f64], ratio: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to set a threshold from".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("anomaly ratio {ratio} must be in [0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if ratio == 0.0 {
        return Ok(sorted[sorted.len() - 1].next_up());
    }
    Ok(quantile_sorted(&sorted, 1.0 - ratio))
}

pub fn flag(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Point adjustment: every ground-truth anomaly run containing at least one
/// predicted positive is predicted positive throughout.
pub fn adjust_predictions(pred: &[bool], gt: &[bool]) -> Result<Vec<bool>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut out = pred.to_vec();
    let mut i = 0;
    while i < gt.len() {
        if !gt[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < gt.len() && gt[i] {
            i += 1;
        }
        if pred[start..i].iter().any(|&p| p) {
            out[start..i].iter_mut().for_each(|p| *p = true);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1. Precision is 0 when nothing is predicted.
pub fn precision_recall_f1(pred: &[bool], gt: &[bool]) -> Result<Prf> {
    if pred.len() != gt.len() {
        return Err(Error::Shape("prediction and label lengths differ".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::UndefinedMetric("no positive labels: recall is undefined".into()));
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fn_) as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}

/// Area under the ROC curve by the trapezoid rule; tied scores move the
/// curve diagonally.
pub fn auroc(scores: &[f64], gt: &[bool]) -> Result<f64> {
    if scores.len() != gt.len() {
        return Err(Error::Shape("score and label lengths differ".into()));
    }
    let pos = gt.iter().filter(|&&g| g).count();
    let neg = gt.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_convention() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25), 0.25);
        assert_eq!(quantile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn nineteen_levels() {
        let l = quantile_levels(0.05).unwrap();
        assert_eq!(l.len(), 19);
        assert!((l[18] - 0.95).abs() < 1e-12);
        assert!(quantile_levels(0.3).is_err());
    }

    #[test]
    fn point_metric_hand_case() {
        let p = [Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap()];
        let x = [Matrix::from_vec(1, 2, vec![1.0, 4.0]).unwrap()];
        let e = [Matrix::filled(1, 2, 1.0)];
        let m = point_metrics(&p, &x, &e).unwrap();
        assert_eq!((m.mae, m.mse), (1.0, 2.0));
        assert_eq!(m.rmse, 2f64.sqrt());
        assert!(point_metrics(&p, &x, &[Matrix::zeros(1, 2)]).is_err());
    }

    #[test]
    fn threshold_cases() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let d = anomaly_threshold(&s, 0.05).unwrap();
        assert_eq!(flag(&s, d).iter().filter(|&&f| f).count(), 5);
        assert!(anomaly_threshold(&s, 1.0).unwrap() <= 1.0);
        assert!(anomaly_threshold(&s, 0.0).unwrap() > 100.0);
        assert!(anomaly_threshold(&[], 0.1).is_err());
    }

    #[test]
    fn adjustment_and_prf() {
        let gt = [false, true, true, true, false];
        let pred = [false, false, true, false, false];
        assert_eq!(adjust_predictions(&pred, &gt).unwrap(), vec![false, true, true, true, false]);
        let p = precision_recall_f1(&[true, true, false], &[true, false, true]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        assert!(precision_recall_f1(&[true], &[false]).is_err());
    }

    #[test]
    fn auroc_extremes() {
        let gt = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &gt).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &gt).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &gt).unwrap(), 0.0);
    }
}
