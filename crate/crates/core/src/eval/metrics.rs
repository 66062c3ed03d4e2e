//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Positive-class F1 for binary tasks, macro-F1 otherwise.
    pub f1: f64,
    /// Binary tasks with both classes present only.
    pub auroc: Option<f64>,
}

fn f1_for(class: usize, predictions: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        // No true positives: F1 is 0, or 1 when the class never occurs and is never predicted.
        return if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Area under the ROC curve as the Mann–Whitney statistic with average
/// ranks for ties. `None` when only one class is present.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Accuracy, F1 and (binary) AUROC from hard predictions and per-class
/// probabilities.
pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    probabilities: &[Vec<f64>],
    classes: usize,
) -> Result<ClassificationMetrics> {
    if predictions.len() != labels.len() || probabilities.len() != labels.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} predictions, {} labels, {} probability rows", predictions.len(), labels.len(), probabilities.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::State("metrics over an empty set".into()));
    }
    if probabilities
        .iter()
        .any(|p| p.len() != classes || p.iter().any(|v| !(0.0..=1.0).contains(v)))
    {
        return Err(Error::shape("compute_metrics", format!("probabilities must be {classes} values in [0, 1]")));
    }
    let n = labels.len();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let macro_f1 = (0..classes).map(|c| f1_for(c, predictions, labels)).sum::<f64>() / classes as f64;
    let (f1, auc) = if classes == 2 {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        (f1_for(1, predictions, labels), auroc(&scores, &pos))
    } else {
        (macro_f1, None)
    };
    Ok(ClassificationMetrics {
        n,
        accuracy: correct as f64 / n as f64,
        macro_f1,
        f1,
        auroc: auc,
    })
}
