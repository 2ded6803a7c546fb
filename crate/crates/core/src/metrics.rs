//! Accuracy and transferability bookkeeping over predicted labels.

use alloc::string::String;

use crate::error::{Error, Result};

/// Success counts for attacks crafted against `source` and replayed on
/// `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TransferRecord {
    pub attack: String,
    pub source: String,
    pub target: String,
    pub n_total: usize,
    pub n_fooled_source: usize,
    pub n_fooled_both: usize,
}

impl TransferRecord {
    /// Tallies adversarial predictions of both models against the labels.
    pub fn tally(
        attack: impl Into<String>,
        source: impl Into<String>,
        target: impl Into<String>,
        pred_source: &[usize],
        pred_target: &[usize],
        labels: &[usize],
    ) -> Result<Self> {
        if pred_source.len() != labels.len() || pred_target.len() != labels.len() {
            return Err(Error::shape(
                "transfer_rate",
                &[pred_source.len(), pred_target.len()],
                &[labels.len()],
            ));
        }
        let mut fooled_s = 0;
        let mut fooled_both = 0;
        for ((&s, &t), &y) in pred_source.iter().zip(pred_target).zip(labels) {
            if s != y {
                fooled_s += 1;
                if t != y {
                    fooled_both += 1;
                }
            }
        }
        Ok(TransferRecord {
            attack: attack.into(),
            source: source.into(),
            target: target.into(),
            n_total: labels.len(),
            n_fooled_source: fooled_s,
            n_fooled_both: fooled_both,
        })
    }

    /// `P(target fooled | source fooled)`, or `None` when the source was
    /// never fooled.
    pub fn rate(&self) -> Option<f64> {
        (self.n_fooled_source > 0).then(|| self.n_fooled_both as f64 / self.n_fooled_source as f64)
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// `(either, avg)`: the fraction of samples where at least one pathway is
/// right, and the mean of the two per-pathway accuracies.
pub fn either_path_accuracy(pred_a: &[usize], pred_b: &[usize], labels: &[usize]) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let either = pred_a
        .iter()
        .zip(pred_b)
        .zip(labels)
        .filter(|((a, b), y)| a == y || b == y)
        .count();
    let avg = 0.5 * (accuracy(pred_a, labels) + accuracy(pred_b, labels));
    (either as f64 / labels.len() as f64, avg)
}

/// Pearson correlation of two equal-length samples; `None` when either has
/// zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / num_traits::Float::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}
