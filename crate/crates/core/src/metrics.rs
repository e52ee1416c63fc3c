//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-class values are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over classes.
    #[default]
    Macro,
    /// Mean weighted by true-class support.
    Weighted,
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
    pub averaging: Averaging,
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    /// Average of the per-class F1 values.
    pub f1: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

impl MetricsReport {
    /// Per-class accuracy, i.e. recall of each class.
    pub fn class_accuracy(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.recall).collect()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and F1 per class (0/0 taken as 0), their
/// average under `averaging`, accuracy and the confusion matrix.
pub fn compute_metrics(truth: &[usize], pred: &[usize], classes: usize, averaging: Averaging) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(Error::shape("compute_metrics", format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Empty("label vectors"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        for l in [t, p] {
            if l >= classes {
                return Err(Error::InvalidLabel {
                    label: l as i64,
                    classes,
                });
            }
        }
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let n = truth.len();
    let weight = |c: &ClassMetrics| match averaging {
        Averaging::Macro => 1.0 / classes as f64,
        Averaging::Weighted => c.support as f64 / n as f64,
    };
    let avg = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|c| weight(c) * f(c)).sum::<f64>();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        averaging,
        precision: avg(|c| c.precision),
        recall: avg(|c| c.recall),
        f1: avg(|c| c.f1),
        accuracy: ratio(correct, n),
        per_class,
        confusion,
        samples: n,
    })
}
