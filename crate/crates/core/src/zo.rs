//! Forward-difference gradient estimation along random unit directions.
//!
//! For a loss `L` at a point `x` in `R^d` and a unit direction `u`, the
//! rank-one estimate is `d (L(x + eps u) - L(x)) / eps * u`; averaging `m`
//! such estimates reduces the variance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// `m` unit vectors drawn uniformly from the sphere in `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub dim: usize,
    pub dirs: Vec<Vec<f64>>,
}

/// Draws `m` directions by normalising standard-normal vectors.
pub fn sample_sphere<R: Rng + ?Sized>(dim: usize, m: usize, rng: &mut R) -> Result<DirectionSet> {
    if dim == 0 || m == 0 {
        return Err(Error::Invalid(
            "sample_sphere needs d >= 1 and m >= 1".into(),
        ));
    }
    let dirs = (0..m).map(|_| unit_vector(dim, rng)).collect();
    Ok(DirectionSet { dim, dirs })
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-300 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    /// Smoothing factor: the forward-difference step length.
    pub epsilon: f64,
    /// Directions averaged per sample.
    pub directions: usize,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            directions: 10,
        }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.directions == 0 {
            return Err(Error::Invalid("need at least one direction".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Per-sample gradient estimates, shaped like the evaluation point.
    pub ghat: Tensor,
    /// Loss rows evaluated, `B * (m + 1)`.
    pub queries_spent: u64,
    /// Loss at the unperturbed point, one value per sample.
    pub base_loss: Vec<f64>,
}

/// Single-direction forward difference.
///
/// Returns the estimate and the number of evaluator calls made (1 when the
/// base loss is supplied, otherwise 2).
pub fn fd_single<F>(
    mut loss_at: F,
    x: &[f64],
    u: &[f64],
    epsilon: f64,
    cached_base: Option<f64>,
) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != u.len() {
        return Err(Error::Shape {
            context: "fd_single direction".into(),
            expected: vec![x.len()],
            got: vec![u.len()],
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::Invalid("epsilon must be positive".into()));
    }
    let mut calls = 0;
    let base = match cached_base {
        Some(v) => v,
        None => {
            calls += 1;
            loss_at(x)?
        }
    };
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss at {x:?}")));
    }
    let shifted: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + epsilon * b).collect();
    let moved = loss_at(&shifted)?;
    calls += 1;
    if !moved.is_finite() {
        return Err(Error::NonFinite(format!("loss at {shifted:?}")));
    }
    let d = x.len() as f64;
    let coef = d * (moved - base) / epsilon;
    Ok((u.iter().map(|v| coef * v).collect(), calls))
}

/// Averaged forward-difference estimate for every row of `x`.
///
/// `loss_at` maps a `B x d` batch to `B` per-row losses; it is called once
/// at `x` and once per direction, each time with the whole batch, and every
/// row gets its own independent directions. The directions are drawn from
/// `rng` before any evaluation so the result does not depend on evaluation
/// order; the `m` perturbed evaluations may run concurrently.
pub fn estimate_grad<F, R>(
    loss_at: F,
    x: &Tensor,
    cfg: &ZoConfig,
    rng: &mut R,
) -> Result<GradientEstimate>
where
    F: Fn(&Tensor) -> Result<Vec<f64>> + Sync,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let (b, d) = (x.rows(), x.cols());
    let m = cfg.directions;
    let base = loss_at(x)?;
    check_losses(&base, b, "unperturbed batch")?;

    // dirs[i] holds the i-th direction of every row, stacked as a B x d matrix.
    let mut dirs = Vec::with_capacity(m);
    for _ in 0..m {
        let mut u = Vec::with_capacity(b * d);
        for _ in 0..b {
            u.extend(unit_vector(d, rng));
        }
        dirs.push(Tensor::from_parts(b, d, u));
    }

    let eps = cfg.epsilon;
    let moved: Vec<Result<Vec<f64>>> = par::map_indices(m, |i| {
        let shifted = x.zip_map(&dirs[i], |a, u| a + eps * u)?;
        let out = loss_at(&shifted)?;
        check_losses(&out, b, &format!("perturbation {i}"))?;
        Ok(out)
    });

    let mut ghat = Tensor::zeros(&[b, d]);
    let scale = d as f64 / (eps * m as f64);
    for (i, res) in moved.into_iter().enumerate() {
        let moved = res?;
        let u = &dirs[i];
        for r in 0..b {
            let coef = scale * (moved[r] - base[r]);
            let urow = u.row(r);
            for (g, uv) in ghat.row_mut(r).iter_mut().zip(urow) {
                *g += coef * uv;
            }
        }
    }
    Ok(GradientEstimate {
        ghat,
        queries_spent: (b * (m + 1)) as u64,
        base_loss: base,
    })
}

fn check_losses(v: &[f64], rows: usize, what: &str) -> Result<()> {
    if v.len() != rows {
        return Err(Error::Shape {
            context: format!("loss evaluator output for {what}"),
            expected: vec![rows],
            got: vec![v.len()],
        });
    }
    if let Some(r) = v.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss at row {r} of {what}")));
    }
    Ok(())
}

/// Cosine similarity between two equally shaped tensors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let dot = a.dot(b)?;
    let n = a.norm() * b.norm();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / n)
}
