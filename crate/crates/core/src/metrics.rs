//! Evaluation metrics. Nothing here touches an oracle or its ledger.

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub use crate::train::accuracy;

/// Clone accuracy as a fraction of target accuracy.
pub fn normalized_accuracy(clone_acc: f64, target_acc: f64) -> Result<f64> {
    if !(target_acc > 0.0) {
        return Err(Error::Invalid(format!(
            "target accuracy must be positive, got {target_acc}"
        )));
    }
    Ok(clone_acc / target_acc)
}

/// Fraction of inputs on which `clone` and `target` predict the same class.
pub fn agreement_rate(clone: &Model, target: &Model, x: &Tensor) -> Result<f64> {
    if x.rows() == 0 || x.numel() == 0 {
        return Err(Error::Invalid(
            "agreement on an empty evaluation set".into(),
        ));
    }
    let a = clone.forward(x)?.argmax_rows();
    let b = target.forward(x)?.argmax_rows();
    let same = a.iter().zip(&b).filter(|(p, q)| p == q).count();
    Ok(same as f64 / a.len() as f64)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median.
pub fn median_abs_deviation(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}
