//! Top-k accuracy and evaluation records.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rank of `label` among `row`: the number of classes that beat it. Ties
/// go to the lower class index, so an equal score at a smaller index beats
/// the label.
fn rank_of(row: &[f64], label: usize) -> usize {
    let s = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

/// Percentage of rows of `logits` `[N, C]` whose label is among the `k`
/// largest entries.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("topk_accuracy", shape, &[labels.len()]));
    }
    let c = shape[1];
    if labels.is_empty() {
        return Err(Error::contract("top-k over zero samples"));
    }
    if k == 0 || k > c {
        return Err(Error::contract(format!("k = {k} outside 1..={c}")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {l} out of range for {c} classes")));
    }
    let hits = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &l)| rank_of(row, l) < k)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub method: String,
    /// Modalities used at inference, e.g. `rgb` or `rgb+flow+boxes`.
    pub modalities: String,
    pub split: String,
    pub top1: f64,
    pub top5: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalResult {
    pub fn from_logits(
        method: impl Into<String>,
        modalities: impl Into<String>,
        split: impl Into<String>,
        logits: &Tensor,
        labels: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let c = logits.shape().get(1).copied().unwrap_or(0);
        Ok(EvalResult {
            method: method.into(),
            modalities: modalities.into(),
            split: split.into(),
            top1: topk_accuracy(logits, labels, 1)?,
            top5: topk_accuracy(logits, labels, 5.min(c))?,
            n_samples: labels.len(),
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hand_examples() {
        let z = Tensor::new(&[2, 3], vec![9.0, 1.0, 0.0, 0.0, 9.0, 1.0]).unwrap();
        assert_eq!(topk_accuracy(&z, &[0, 2], 1).unwrap(), 50.0);
        assert_eq!(topk_accuracy(&z, &[0, 2], 2).unwrap(), 100.0);
        assert_eq!(topk_accuracy(&z, &[1, 0], 3).unwrap(), 100.0);
    }

    #[test]
    fn ties_favor_lower_index() {
        let z = Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(topk_accuracy(&z, &[0], 1).unwrap(), 100.0);
        assert_eq!(topk_accuracy(&z, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&z, &[2], 2).unwrap(), 0.0);
    }

    #[test]
    fn contract_errors() {
        let z = Tensor::zeros(&[1, 3]);
        assert!(topk_accuracy(&z, &[0], 0).is_err());
        assert!(topk_accuracy(&z, &[0], 4).is_err());
        assert!(topk_accuracy(&z, &[3], 1).is_err());
        assert!(topk_accuracy(&z, &[0, 1], 1).is_err());
    }
}
