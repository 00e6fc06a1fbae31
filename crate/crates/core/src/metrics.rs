//! Threshold, ranking (AUROC/AUPRC), and calibration (ECE/Brier) metrics.
//!
//! Ranking metrics use the rank/group formulations; the test suite holds
//! them to brute-force pairwise/prefix oracles within 1e-9. Metrics that
//! are undefined on a split (single-class AUROC, no-positive AUPRC) are
//! reported as absent rather than 0.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One equal-width calibration bin; `mean_p` and `pos_rate` are 0 for
/// empty bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub count: usize,
    pub mean_p: f64,
    pub pos_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    pub n_pos: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the split has a single class.
    pub auroc: Option<f64>,
    /// Absent when the split has no positives.
    pub auprc: Option<f64>,
    pub ece: f64,
    pub brier: f64,
    pub n_bins: usize,
    pub reliability: Vec<ReliabilityBin>,
}

fn check_lengths(op: &'static str, p: &[f64], y: &[u8]) -> Result<()> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::ShapeError {
            op,
            left: (p.len(), 1),
            right: (y.len(), 1),
        });
    }
    Ok(())
}

/// Predict positive iff p >= tau. Degenerate cases follow the usual
/// conventions: precision 0 with no positive predictions, recall 0 with no
/// positives, f1 0 when precision + recall = 0.
pub fn threshold_metrics(p: &[f64], y: &[u8], tau: f64) -> Result<ThresholdMetrics> {
    check_lengths("threshold_metrics", p, y)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&pi, &yi) in p.iter().zip(y) {
        match (pi >= tau, yi != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = p.len() as f64;
    let accuracy = (tp + tn) as f64 / n;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ThresholdMetrics {
        accuracy,
        precision,
        recall,
        f1,
    })
}

/// Indices 0..n sorted ascending by score; stable so runs of equal scores
/// stay contiguous.
fn sorted_by_score(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    idx
}

/// Mann-Whitney AUROC with half credit for tied scores, via tie-averaged
/// ranks: AUROC = (R_pos - P(P+1)/2) / (P*N).
pub fn auroc(p: &[f64], y: &[u8]) -> Result<f64> {
    check_lengths("auroc", p, y)?;
    let pos = y.iter().filter(|&&v| v != 0).count();
    let neg = y.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auroc"));
    }
    let idx = sorted_by_score(p);
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && p[idx[j]] == p[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average (i + j + 1) / 2.
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            if y[k] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p_ = pos as f64;
    let u = rank_sum_pos - p_ * (p_ + 1.0) / 2.0;
    Ok(u / (p_ * neg as f64))
}

/// Average precision over descending-score prefixes, processing tied
/// scores as one group: AP = sum_k (R_k - R_{k-1}) * P_k.
pub fn auprc(p: &[f64], y: &[u8]) -> Result<f64> {
    check_lengths("auprc", p, y)?;
    let pos = y.iter().filter(|&&v| v != 0).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("auprc"));
    }
    let idx = sorted_by_score(p);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    // Walk groups from the highest score down.
    let mut hi = idx.len();
    while hi > 0 {
        let mut lo = hi;
        while lo > 0 && p[idx[lo - 1]] == p[idx[hi - 1]] {
            lo -= 1;
        }
        for &k in &idx[lo..hi] {
            if y[k] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        hi = lo;
    }
    Ok(ap)
}

fn bin_of(p: f64, n_bins: usize) -> usize {
    // p = 1.0 (and any rounding overshoot) lands in the last bin.
    ((p * n_bins as f64) as usize).min(n_bins - 1)
}

/// Positive-class reliability ECE over `n_bins` equal-width bins:
/// sum_b (n_b / n) * |mean(p_b) - posrate_b|, empty bins contributing 0.
pub fn ece(p: &[f64], y: &[u8], n_bins: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    check_lengths("ece", p, y)?;
    if n_bins == 0 {
        return Err(Error::ConfigError("ece requires n_bins >= 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut sum_p = vec![0.0f64; n_bins];
    let mut sum_y = vec![0.0f64; n_bins];
    for (&pi, &yi) in p.iter().zip(y) {
        let b = bin_of(pi, n_bins);
        count[b] += 1;
        sum_p[b] += pi;
        sum_y[b] += (yi != 0) as u8 as f64;
    }
    let n = p.len() as f64;
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        if count[b] == 0 {
            bins.push(ReliabilityBin {
                count: 0,
                mean_p: 0.0,
                pos_rate: 0.0,
            });
            continue;
        }
        let c = count[b] as f64;
        let mean_p = sum_p[b] / c;
        let pos_rate = sum_y[b] / c;
        total += c / n * (mean_p - pos_rate).abs();
        bins.push(ReliabilityBin {
            count: count[b],
            mean_p,
            pos_rate,
        });
    }
    Ok((total, bins))
}

/// Mean squared error between probability and binary label.
pub fn brier(p: &[f64], y: &[u8]) -> Result<f64> {
    check_lengths("brier", p, y)?;
    let mut acc = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let d = pi - (yi != 0) as u8 as f64;
        acc += d * d;
    }
    Ok(acc / p.len() as f64)
}

/// All metrics for one split. Single-class ranking metrics come back as
/// `None` instead of failing the whole report.
pub fn metrics_report(
    split: &str,
    p: &[f64],
    y: &[u8],
    tau: f64,
    n_bins: usize,
) -> Result<MetricsReport> {
    let t = threshold_metrics(p, y, tau)?;
    let auroc = match auroc(p, y) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let auprc = match auprc(p, y) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let (ece_v, reliability) = ece(p, y, n_bins)?;
    let brier_v = brier(p, y)?;
    Ok(MetricsReport {
        split: split.to_string(),
        n: p.len(),
        n_pos: y.iter().filter(|&&v| v != 0).count(),
        threshold: tau,
        accuracy: t.accuracy,
        precision: t.precision,
        recall: t.recall,
        f1: t.f1,
        auroc,
        auprc,
        ece: ece_v,
        brier: brier_v,
        n_bins,
        reliability,
    })
}
