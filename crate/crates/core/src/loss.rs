//! Divergences between probability vectors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

/// Tolerance on `sum(p) == 1` for validated inputs.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[inline]
fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// `KL(p || q) = sum_i p_i (log p_i - log q_i)` with both logs clamped.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            context: "kl_divergence".into(),
            expected: vec![p.len()],
            got: vec![q.len()],
        });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_terms(p, q))
}

fn check_distribution(v: &[f64], name: &str) -> Result<()> {
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Invalid(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Per-row KL divergence of two equally shaped probability matrices, as a
/// `rows x 1` column. Inputs are not validated.
pub fn kl_rows(p: &Tensor, q: &Tensor) -> Tensor {
    let vals = (0..p.rows())
        .map(|r| kl_terms(p.row(r), q.row(r)))
        .collect();
    Tensor::from_parts(p.rows(), 1, vals)
}

/// Mean of [`kl_rows`].
pub fn kl_mean(p: &Tensor, q: &Tensor) -> f64 {
    kl_rows(p, q).mean()
}

/// Checks every row of `t` is a probability vector.
pub fn check_probability_rows(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        check_distribution(t.row(r), &format!("row {r}"))?;
    }
    Ok(())
}

/// One-hot encoding of class labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Invalid(format!("label {l} >= {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_distributions() {
        let p = [0.25; 4];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn point_mass_against_uniform() {
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[0.7, 0.7], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    fn normalize(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn matches_direct_summation(
            raw_p in prop::collection::vec(0.01f64..1.0, 5),
            raw_q in prop::collection::vec(0.01f64..1.0, 5),
        ) {
            let p = normalize(raw_p);
            let q = normalize(raw_q);
            // Direct formula with no clamping (all entries exceed the floor).
            let mut oracle = 0.0;
            for i in 0..5 {
                oracle += p[i] * (p[i].ln() - q[i].ln());
            }
            let v = kl_divergence(&p, &q).unwrap();
            prop_assert!((v - oracle).abs() <= 1e-15 * oracle.abs().max(1.0));
            prop_assert!(v >= -1e-9);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }
    }
}
