//! Confusion matrix and intersection-over-union.

use crate::centers::LabelMask;
use crate::error::{Error, Result};

/// Counts of `(ground truth, prediction)` over supervised pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_class: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_class: usize) -> Self {
        ConfusionMatrix {
            n_class,
            counts: vec![0; n_class * n_class],
        }
    }

    pub fn n_class(&self) -> usize {
        self.n_class
    }

    /// Count for ground truth `gt` predicted as `pred`.
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_class + pred]
    }

    /// Add one image's predictions; ignored pixels are skipped.
    pub fn add(&mut self, pred: &[u8], mask: &LabelMask) -> Result<()> {
        if pred.len() != mask.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} pixels",
                pred.len(),
                mask.len()
            )));
        }
        mask.validate(self.n_class)?;
        for (i, &p) in pred.iter().enumerate() {
            if let Some(gt) = mask.class_at(i) {
                let p = p as usize;
                if p >= self.n_class {
                    return Err(Error::invalid(format!("prediction {p} out of range")));
                }
                self.counts[gt * self.n_class + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` per class; `None` for classes absent from the
    /// ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.n_class;
        (0..n)
            .map(|k| {
                let tp = self.get(k, k);
                let gt: u64 = (0..n).map(|p| self.get(k, p)).sum();
                if gt == 0 {
                    return None;
                }
                let pred: u64 = (0..n).map(|g| self.get(g, k)).sum();
                Some(tp as f64 / (gt + pred - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth (0 when none are).
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// Fraction of supervised pixels classified correctly.
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.n_class).map(|k| self.get(k, k)).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}
