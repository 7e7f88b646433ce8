//! Top-1 accuracy and F1 scores.
//!
//! A class's F1 is `2·tp / (2·tp + fp + fn)`, which equals the harmonic mean of
//! precision and recall and is 0 when the class is never true nor predicted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_predictions(preds: &[usize], labels: &[u32], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::dim(format!("{} predictions for {} labels", preds.len(), labels.len())));
        }
        let mut m = Self::new(classes);
        for (&p, &l) in preds.iter().zip(labels) {
            m.record(l as usize, p)?;
        }
        Ok(m)
    }

    /// Builds a matrix from explicit rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::dim("confusion matrix must be square"));
        }
        Ok(Self { classes: k, counts: rows.concat() })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::Data(format!("class pair ({truth}, {predicted}) outside {} classes", self.classes)));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|j| self.get(class, j)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, class)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn class_f1(&self, class: usize) -> f64 {
        let tp = self.get(class, class);
        let fp = self.predicted(class) - tp;
        let fn_ = self.support(class) - tp;
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        }
    }
}

/// Fraction of positions where `preds` matches `labels`; 0 for empty input.
pub fn accuracy(preds: &[usize], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(&p, &l)| p == l as usize).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(m: &ConfusionMatrix) -> f64 {
    if m.classes() == 0 {
        return 0.0;
    }
    (0..m.classes()).map(|c| m.class_f1(c)).sum::<f64>() / m.classes() as f64
}

/// Per-class F1 weighted by true-class support.
pub fn weighted_f1(m: &ConfusionMatrix) -> f64 {
    let total = m.total();
    if total == 0 {
        return 0.0;
    }
    (0..m.classes()).map(|c| m.class_f1(c) * m.support(c) as f64).sum::<f64>() / total as f64
}

/// Row-wise argmax of a probability or logit matrix.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|i| argmax(scores.row(i))).collect()
}

/// The evaluation triple reported per metrics row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

pub fn evaluate(preds: &[usize], labels: &[u32], classes: usize) -> Result<Evaluation> {
    let m = ConfusionMatrix::from_predictions(preds, labels, classes)?;
    Ok(Evaluation { accuracy: m.accuracy(), macro_f1: macro_f1(&m), weighted_f1: weighted_f1(&m) })
}
