//! Macro-averaged classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `matrix[truth][pred]` counts.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::param("pred", format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::param("pred", format!("label {} outside {classes} classes", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class precision and recall are zero when their denominator is;
/// F1 is the mean of per-class F1 values.
pub fn scores_from_confusion(m: &[Vec<u64>]) -> ClassificationScores {
    let k = m.len();
    let total: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..k).map(|i| m[i][i]).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = m[c][c];
        let predicted: u64 = (0..k).map(|t| m[t][c]).sum();
        let actual: u64 = m[c].iter().sum();
        let pc = ratio(tp, predicted);
        let rc = ratio(tp, actual);
        p += pc;
        r += rc;
        f += if pc + rc > 0.0 { 2.0 * pc * rc / (pc + rc) } else { 0.0 };
    }
    let kf = k as f64;
    ClassificationScores { accuracy: ratio(correct, total), precision: p / kf, recall: r / kf, f1: f / kf }
}

pub fn classification_scores(pred: &[usize], truth: &[usize], classes: usize) -> Result<ClassificationScores> {
    Ok(scores_from_confusion(&confusion_matrix(pred, truth, classes)?))
}
