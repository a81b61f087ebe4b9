//! Synthetic classification datasets with features in `[-1, 1]`.
//!
//! Raw samples are drawn in units of the per-coordinate noise scale, divided
//! by a fixed, kind-dependent scale and clipped to `[-1, 1]`. The scale does
//! not depend on the drawn samples, so datasets of related kinds (for
//! example blobs and shifted blobs) share one input space.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// One isotropic Gaussian per class, centred on a signed coordinate axis.
    Blobs,
    /// Blobs with every sample offset along a fixed direction and wider noise.
    ShiftedBlobs,
    /// Blobs under a fixed random rotation.
    RotatedBlobs,
    /// Concentric rings in a fixed random plane.
    Rings,
    /// Class-specific ±1 templates with additive noise.
    GridPatterns,
}

impl DatasetKind {
    pub fn id(self) -> &'static str {
        match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::ShiftedBlobs => "shifted-blobs",
            DatasetKind::RotatedBlobs => "rotated-blobs",
            DatasetKind::Rings => "rings",
            DatasetKind::GridPatterns => "grid-patterns",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    /// Distance of each blob centre from the origin, in noise standard
    /// deviations. Also the ring spacing and template amplitude.
    pub separation: f64,
    /// Raw units mapped to one unit of feature space before clipping. The
    /// default of 100 leaves the data on a small patch of the query space,
    /// the way natural images sit in pixel space; [`DatasetSpec::fitted_scale`]
    /// just fits the clusters inside the cube instead.
    pub scale: f64,
}

fn default_scale() -> f64 {
    100.0
}

fn default_separation() -> f64 {
    5.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            n_train: 4000,
            n_test: 1000,
            dim: 32,
            classes: 4,
            seed: 0,
            separation: default_separation(),
            scale: default_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

impl Dataset {
    /// Readable name plus a short digest of the full spec, so datasets that
    /// differ in any field get different ids.
    pub fn id(&self) -> String {
        let spec = toml::to_string(&self.spec).unwrap_or_default();
        let digest = sha2::Sha256::digest(spec.as_bytes());
        format!(
            "{}-d{}-k{}-s{}-{:02x}{:02x}{:02x}{:02x}",
            self.spec.kind.id(),
            self.spec.dim,
            self.spec.classes,
            self.spec.seed,
            digest[0],
            digest[1],
            digest[2],
            digest[3]
        )
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Loads a CSV with one row per sample: features, then an integer label.
    /// The first `n_test` rows after a seeded shuffle form the test split.
    pub fn from_csv(path: impl AsRef<Path>, n_test: usize, seed: u64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let vals: Vec<&str> = rec.iter().collect();
            let (label, feats) = vals
                .split_last()
                .ok_or_else(|| Error::Invalid(format!("row {i} is empty")))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("row {i}: bad label `{label}`")))?;
            let feats = feats
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("row {i}: {e}")))?;
            if feats.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!("row {i}: feature outside [-1, 1]")));
            }
            rows.push((feats, label));
        }
        if rows.len() <= n_test {
            return Err(Error::Invalid(
                "not enough rows for the requested test split".into(),
            ));
        }
        rows.shuffle(&mut stream(seed, Stream::Dataset));
        let dim = rows[0].0.len();
        let classes = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        let split = |rs: &[(Vec<f64>, usize)]| -> Result<(Tensor, Vec<usize>)> {
            let x = Tensor::from_rows(&rs.iter().map(|r| r.0.clone()).collect::<Vec<_>>())?;
            Ok((x, rs.iter().map(|r| r.1).collect()))
        };
        let (test_x, test_y) = split(&rows[..n_test])?;
        let (train_x, train_y) = split(&rows[n_test..])?;
        Ok(Self {
            spec: DatasetSpec {
                kind: DatasetKind::Blobs,
                n_train: train_y.len(),
                n_test,
                dim,
                classes,
                seed,
                separation: 0.0,
                scale: 1.0,
            },
            train_x,
            train_y,
            test_x,
            test_y,
        })
    }
}

impl DatasetSpec {
    /// Smallest scale that keeps nearly every sample of this kind inside
    /// the cube without clipping.
    pub fn fitted_scale(&self) -> f64 {
        match self.kind {
            DatasetKind::Rings => self.separation * self.classes as f64 + 4.0,
            _ => self.separation + 4.0,
        }
    }

    /// The same spec with [`DatasetSpec::fitted_scale`] applied.
    pub fn fitted(mut self) -> Self {
        self.scale = self.fitted_scale();
        self
    }
}

fn blob_center(k: usize, dim: usize, radius: f64) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    c[k / 2] = if k.is_multiple_of(2) { radius } else { -radius };
    c
}

/// Deterministic rotation from a seed (Gram-Schmidt on a Gaussian matrix).
fn random_rotation(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed ^ 0x005e_ed0f_0b1a, Stream::Dataset);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn check_spec(spec: &DatasetSpec) -> Result<()> {
    if spec.dim == 0 || spec.classes == 0 || spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::Invalid("dataset sizes must be positive".into()));
    }
    if !(spec.separation > 0.0) {
        return Err(Error::Invalid("dataset separation must be positive".into()));
    }
    if !(spec.scale > 0.0) || !spec.scale.is_finite() {
        return Err(Error::Invalid("dataset scale must be positive".into()));
    }
    let limit = match spec.kind {
        DatasetKind::Blobs | DatasetKind::ShiftedBlobs | DatasetKind::RotatedBlobs => 2 * spec.dim,
        DatasetKind::Rings => usize::MAX,
        DatasetKind::GridPatterns => 1usize << spec.dim.min(20),
    };
    if spec.kind == DatasetKind::Rings && spec.dim < 2 {
        return Err(Error::Invalid("rings need at least 2 dimensions".into()));
    }
    if spec.classes > limit {
        return Err(Error::Invalid(format!(
            "{} classes exceed the {limit} clusters representable by {} in {} dimensions",
            spec.classes,
            spec.kind.id(),
            spec.dim
        )));
    }
    Ok(())
}

fn rotate(rot: Option<&[Vec<f64>]>, p: Vec<f64>) -> Vec<f64> {
    match rot {
        Some(rot) => rot
            .iter()
            .map(|row| row.iter().zip(&p).map(|(a, b)| a * b).sum())
            .collect(),
        None => p,
    }
}

/// Builds the dataset described by `spec`; the same spec always yields the
/// same data.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    check_spec(spec)?;
    let mut rng = stream(spec.seed, Stream::Dataset);
    let templates: Vec<Vec<f64>> = if spec.kind == DatasetKind::GridPatterns {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        while out.len() < spec.classes {
            let t: Vec<f64> = (0..spec.dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let key: Vec<bool> = t.iter().map(|v| *v > 0.0).collect();
            if seen.insert(key) {
                out.push(t);
            }
        }
        out
    } else {
        Vec::new()
    };
    let rotation = matches!(spec.kind, DatasetKind::RotatedBlobs | DatasetKind::Rings)
        .then(|| random_rotation(spec.dim, spec.seed));
    let shift: Vec<f64> = if spec.kind == DatasetKind::ShiftedBlobs {
        let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| 1.5 * x / n).collect()
    } else {
        vec![0.0; spec.dim]
    };
    let scale = spec.scale;

    let sample = |label: usize, rng: &mut crate::rng::RunRng| -> Vec<f64> {
        let noise = |rng: &mut crate::rng::RunRng| -> f64 { rng.sample(StandardNormal) };
        let raw: Vec<f64> = match spec.kind {
            DatasetKind::Blobs | DatasetKind::ShiftedBlobs | DatasetKind::RotatedBlobs => {
                let sigma = if spec.kind == DatasetKind::ShiftedBlobs {
                    1.5
                } else {
                    1.0
                };
                let c = blob_center(label, spec.dim, spec.separation);
                let p: Vec<f64> = c
                    .iter()
                    .zip(&shift)
                    .map(|(ci, si)| ci + si + sigma * noise(rng))
                    .collect();
                rotate(rotation.as_deref(), p)
            }
            DatasetKind::Rings => {
                let r = spec.separation * (label as f64 + 1.0);
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let mut p: Vec<f64> = (0..spec.dim).map(|_| 0.3 * noise(rng)).collect();
                p[0] += r * theta.cos();
                p[1] += r * theta.sin();
                rotate(rotation.as_deref(), p)
            }
            DatasetKind::GridPatterns => templates[label]
                .iter()
                .map(|t| t * spec.separation + noise(rng))
                .collect(),
        };
        raw.into_iter()
            .map(|v| (v / scale).clamp(-1.0, 1.0))
            .collect()
    };

    let split = |n: usize, rng: &mut crate::rng::RunRng| -> Result<(Tensor, Vec<usize>)> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(rng);
        let rows: Vec<Vec<f64>> = labels.iter().map(|&l| sample(l, rng)).collect();
        Ok((Tensor::from_rows(&rows)?, labels))
    };
    let (train_x, train_y) = split(spec.n_train, &mut rng)?;
    let (test_x, test_y) = split(spec.n_test, &mut rng)?;
    Ok(Dataset {
        spec: spec.clone(),
        train_x,
        train_y,
        test_x,
        test_y,
    })
}
