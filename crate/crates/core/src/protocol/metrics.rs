use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Probability that a random known score exceeds a random unknown one, ties
/// counted one half, computed from midranks of the pooled scores.
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    if known.is_empty() || unknown.is_empty() {
        return Err(invalid!(
            "AUROC needs scores on both sides ({} known, {} unknown)",
            known.len(),
            unknown.len()
        ));
    }
    if known.iter().chain(unknown).any(|s| s.is_nan()) {
        return Err(invalid!("AUROC scores contain NaN"));
    }
    let mut pooled: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, true))
        .chain(unknown.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks are integers or half-integers, so doubling keeps the sum exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        let known_in_tie = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += twice_midrank * known_in_tie;
        i = j + 1;
    }
    let n = known.len() as u128;
    let m = unknown.len() as u128;
    let twice_u = twice_rank_sum - n * (n + 1);
    Ok(twice_u as f64 / (2 * n * m) as f64)
}

/// Per-class F1 over `n_classes` labels (`0..n_classes`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
    pub support: Vec<usize>,
    /// Classes with neither true nor predicted members; they score 0.
    pub degenerate: Vec<usize>,
}

pub fn macro_f1(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<F1Report> {
    if y_true.len() != y_pred.len() {
        return Err(invalid!("{} true labels but {} predictions", y_true.len(), y_pred.len()));
    }
    if n_classes == 0 {
        return Err(invalid!("macro-F1 over zero classes"));
    }
    if let Some(bad) = y_true.iter().chain(y_pred).find(|&&l| l >= n_classes) {
        return Err(invalid!("label {bad} outside 0..{n_classes}"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let mut degenerate = Vec::new();
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            if support[c] == 0 && predicted[c] == 0 {
                degenerate.push(c);
            }
            // 2PR / (P + R) simplifies to 2TP / (support + predicted)
            let denom = support[c] + predicted[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(F1Report {
        macro_f1: per_class.iter().sum::<f64>() / n_classes as f64,
        per_class,
        support,
        degenerate,
    })
}

pub fn closed_set_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(invalid!(
            "accuracy needs equal, non-empty label lists ({} vs {})",
            y_true.len(),
            y_pred.len()
        ));
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// One evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when either side of the known/unknown split is empty.
    pub auroc: Option<f64>,
    pub macro_f1: f64,
    pub closed_set_accuracy: f64,
    /// Indexed by class, with the unknown class last.
    pub per_class_f1: Vec<f64>,
    pub degenerate_classes: Vec<usize>,
    pub n_known: usize,
    pub n_unknown: usize,
}
