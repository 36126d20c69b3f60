//! Binary classification metrics.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// Recall of class 1; zero when there are no positives.
    pub sen: f64,
    /// Recall of class 0; zero when there are no negatives.
    pub spe: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics for class-1 probabilities `scores`, predicting class 1 when the
/// score is at least `threshold`.
pub fn compute_metrics(scores: &[f64], labels: &[usize], threshold: f64) -> Result<Metrics> {
    check(scores, labels)?;
    let mut m = Metrics::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    m.acc = ratio(m.tp + m.tn, scores.len());
    m.sen = ratio(m.tp, m.tp + m.fn_);
    m.spe = ratio(m.tn, m.tn + m.fp);
    m.auc = auc(scores, labels)?;
    Ok(m)
}

fn check(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Label { label, classes: 2 });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("scores contain NaN".into()));
    }
    Ok(())
}

/// Area under the ROC curve from the Mann–Whitney rank statistic with
/// midranks for ties, i.e. the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. When only one class is present the
/// value is 0.5.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(0.5);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, so midranks stay integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let doubled_midrank = (start + 1 + end) as u128;
        let tied_positives = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        doubled_rank_sum += doubled_midrank * tied_positives;
        start = end;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * positives * negatives) as f64)
}
