use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Contract(format!(
                "{} labels but {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&y, &p) in labels.iter().zip(preds) {
            if y >= num_classes || p >= num_classes {
                return Err(Error::Data(format!(
                    "class pair ({y}, {p}) outside [0, {num_classes})"
                )));
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let c = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let per_class_f1: Vec<f64> = (0..c)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let predicted: u64 = (0..c).map(|r| confusion[r][k]).sum();
                let actual: u64 = confusion[k].iter().sum();
                let denom = (predicted + actual) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect();
        Metrics {
            accuracy: if total == 0 {
                0.0
            } else {
                trace as f64 / total as f64
            },
            macro_f1: per_class_f1.iter().sum::<f64>() / c.max(1) as f64,
            per_class_f1,
            confusion,
        }
    }

    pub fn support(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}
