//! Accuracy and macro-averaged precision, recall and F1.
//!
//! Any 0/0 ratio (a class never predicted, or never present) is defined as 0
//! and still counts toward the macro mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label and prediction lengths differ ({truth} vs {predicted})")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<usize>>) -> Self {
        let total = counts.iter().flatten().sum();
        Self { counts, total }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn trace(&self) -> usize {
        (0..self.n_classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> usize {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> usize {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

pub fn confusion(
    truth: &[usize],
    predicted: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        let label = t.max(p);
        if label >= n_classes {
            return Err(MetricsError::LabelOutOfRange { label, n_classes });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        total: truth.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_report(cm: &ConfusionMatrix) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = (0..cm.n_classes())
        .map(|k| {
            let tp = cm.counts[k][k];
            let precision = ratio(tp, cm.col_sum(k));
            let recall = ratio(tp, cm.row_sum(k));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cm.row_sum(k),
            }
        })
        .collect();
    let c = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c;
    MetricsReport {
        accuracy: ratio(cm.trace(), cm.total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion: cm.clone(),
    }
}

/// Confusion matrix plus macro report in one call.
pub fn evaluate(
    truth: &[usize],
    predicted: &[usize],
    n_classes: usize,
) -> Result<MetricsReport, MetricsError> {
    Ok(macro_report(&confusion(truth, predicted, n_classes)?))
}

impl MetricsReport {
    /// `A/MAP/MAR/MAF` as whole percentages, for display only.
    pub fn percent_summary(&self) -> String {
        let pct = |v: f64| (v * 100.0).round() as i64;
        format!(
            "A={}% MAP={}% MAR={}% MAF={}%",
            pct(self.accuracy),
            pct(self.macro_precision),
            pct(self.macro_recall),
            pct(self.macro_f1)
        )
    }
}
