//! Grading metrics with HGG as the positive class.

use serde::{Deserialize, Serialize};

use crate::datamodel::Grade;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsMetrics {
    pub acc: f64,
    /// Sensitivity; `None` without HGG cases.
    pub sen: Option<f64>,
    /// Specificity; `None` without LGG cases.
    pub spe: Option<f64>,
}

/// Accuracy is NaN for an empty input.
pub fn classification_metrics(pred: &[Grade], truth: &[Grade]) -> ClsMetrics {
    assert_eq!(pred.len(), truth.len(), "one prediction per case");
    let (mut tp, mut tn, mut fp, mut fun) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (Grade::Hgg, Grade::Hgg) => tp += 1,
            (Grade::Lgg, Grade::Lgg) => tn += 1,
            (Grade::Hgg, Grade::Lgg) => fp += 1,
            (Grade::Lgg, Grade::Hgg) => fun += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    ClsMetrics {
        acc: ratio(tp + tn, fp + fun).unwrap_or(f64::NAN),
        sen: ratio(tp, fun),
        spe: ratio(tn, fp),
    }
}
