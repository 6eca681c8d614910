//! Regression and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{BrainError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    pub r: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub auroc: f64,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(BrainError::Shape(format!("{a} predictions for {b} targets")));
    }
    if a == 0 {
        return Err(BrainError::Data("cannot evaluate an empty set".into()));
    }
    Ok(())
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn evaluate_regression(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    check_lengths(preds.len(), targets.len())?;
    let n = preds.len() as f64;
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    Ok(RegressionMetrics {
        mse,
        mae,
        r: pearson(preds, targets),
    })
}

/// Area under the ROC curve from the Mann-Whitney statistic with average
/// ranks, so tied scores earn half credit. NaN if a class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return f64::NAN;
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
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    (rank_sum - p * (p + 1.0) / 2.0) / (p * q)
}

/// Accuracy and balanced accuracy at logit threshold 0 (positive when > 0), plus AUROC.
pub fn evaluate_classification(logits: &[f64], labels: &[bool]) -> Result<ClassificationMetrics> {
    check_lengths(logits.len(), labels.len())?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&z, &l) in logits.iter().zip(labels) {
        match (z > 0.0, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let mut recalls = Vec::new();
    if pos > 0 {
        recalls.push(tp as f64 / pos as f64);
    }
    if neg > 0 {
        recalls.push(tn as f64 / neg as f64);
    }
    Ok(ClassificationMetrics {
        acc: (tp + tn) as f64 / labels.len() as f64,
        bacc: recalls.iter().sum::<f64>() / recalls.len() as f64,
        auroc: auroc(logits, labels),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
