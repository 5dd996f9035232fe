use crate::error::{Error, Result};

/// Accuracy, per-class accuracy and the row-normalized confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `counts[r][c]`: samples of true class `r` predicted as `c`.
    pub counts: Vec<Vec<usize>>,
    /// `confusion[r][c] = counts[r][c] / sum_c counts[r][c]`; rows of absent
    /// classes are all zero.
    pub confusion: Vec<Vec<f64>>,
}

impl ClassificationReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::input("cannot score an empty set"));
        }
        if labels.len() != predictions.len() {
            return Err(Error::input(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut counts = vec![vec![0usize; classes]; classes];
        for (&l, &p) in labels.iter().zip(predictions) {
            if l >= classes || p >= classes {
                return Err(Error::input(format!(
                    "class index out of range ({l} / {p} for {classes} classes)"
                )));
            }
            counts[l][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| counts[c][c]).sum();
        let confusion: Vec<Vec<f64>> = counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&k| if n == 0 { 0.0 } else { k as f64 / n as f64 })
                    .collect()
            })
            .collect();
        let per_class_accuracy = (0..classes).map(|c| confusion[c][c]).collect();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            per_class_accuracy,
            counts,
            confusion,
        })
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|c| self.counts[c][c]).sum()
    }
}
