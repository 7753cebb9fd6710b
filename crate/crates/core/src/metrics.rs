//! Confusion matrices and the overall / average accuracy and Cohen's kappa
//! derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K×K counts, rows are true classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn accumulate(&mut self, truth: usize, pred: usize) -> Result<()> {
        for id in [truth, pred] {
            if id >= self.classes {
                return Err(Error::IdOutOfRange {
                    id,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Elementwise sum, used to combine evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "merging {}-class matrix into {}-class matrix",
                other.classes, self.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptyMatrix),
            n => Ok(n as f64),
        }
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let n = self.nonempty()?;
        Ok(self.trace() as f64 / n)
    }

    /// Recall per class; `None` for classes with no true samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| match self.row_sum(i) {
                0 => None,
                r => Some(self.get(i, i) as f64 / r as f64),
            })
            .collect()
    }

    /// Mean recall over classes present in the evaluated set.
    pub fn average_accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        let present: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Computed as `(n·trace − Σ r_i c_i) / (n² − Σ r_i c_i)` in integers so
    /// only the final division rounds.
    pub fn cohens_kappa(&self) -> Result<f64> {
        self.nonempty()?;
        let n = self.total() as u128;
        let agree = n * self.trace() as u128;
        let chance: u128 = (0..self.classes)
            .map(|i| self.row_sum(i) as u128 * self.col_sum(i) as u128)
            .sum();
        if chance == n * n {
            // Chance agreement is total: a single class on both axes.
            return Ok(if agree == n * n { 1.0 } else { 0.0 });
        }
        Ok((agree as i128 - chance as i128) as f64 / (n * n - chance) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class, `null` when the class has no samples in the split
    /// (such classes are left out of `aa`).
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    pub train_time_s: f64,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, train_time_s: f64, config: serde_json::Value) -> Result<Self> {
        Ok(Self {
            oa: cm.overall_accuracy()?,
            aa: cm.average_accuracy()?,
            kappa: cm.cohens_kappa()?,
            per_class: cm.per_class_accuracy(),
            confusion: cm.rows(),
            train_time_s,
            config,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
