//! Partial-data variant: a Wasserstein critic trained with a gradient
//! penalty separates a small set of real inputs from generated ones, and the
//! generator loss gains a `-lambda * D(x)` term pulling queries toward the
//! real distribution.
//!
//! The critic sees generated inputs in the same `[-1, 1]` space as the seed
//! data. Critic training never queries the oracle.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::{
    disagreement, Attack, AttackConfig, AttackOutcome, EvalSet, GeneratorTerm, GradientSource,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::graph::Graph;
use crate::nn::{LayerSpec, Model, ParamGrads};
use crate::optim::Adam;
use crate::oracle::SoftLabelOracle;
use crate::rng::{stream, RunRng, Stream};
use crate::tensor::Tensor;

/// Unlabelled inputs from the target's training distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    x: Tensor,
}

impl SeedSet {
    pub fn new(x: Tensor) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::Invalid("seed set is empty".into()));
        }
        if x.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid("seed inputs must lie in [-1, 1]".into()));
        }
        Ok(Self { x })
    }

    /// The first `n` training rows after a seeded shuffle.
    pub fn from_dataset(data: &Dataset, n: usize, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..data.train_y.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut stream(seed, Stream::Dataset));
        idx.truncate(n);
        Self::new(data.train_x.select_rows(&idx))
    }

    /// Headerless CSV, one row of features per line.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let row = rec?
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Invalid(format!("seed row {i}: {e}")))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Invalid("seed set is empty".into()));
        }
        Self::new(Tensor::from_rows(&rows)?)
    }

    /// Binary layout: `n` and `d` as little-endian `u64`, then `n * d`
    /// little-endian `f64` values in row-major order.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        let n = u64::from_le_bytes(head[..8].try_into().expect("8 bytes")) as usize;
        let d = u64::from_le_bytes(head[8..].try_into().expect("8 bytes")) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if Some(bytes.len()) != n.checked_mul(d).and_then(|v| v.checked_mul(8)) {
            return Err(Error::Invalid(format!(
                "seed file declares {n}x{d} values but holds {} bytes",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(Tensor::matrix(n, d, data)?)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.x.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.x.cols() as u64).to_le_bytes())?;
        for v in self.x.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Loads `.csv` files as CSV and anything else as the binary layout.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "csv") {
            Self::from_csv(path)
        } else {
            Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.x
    }

    /// `b` rows drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Tensor {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.len())).collect();
        self.x.select_rows(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdConfig {
    /// Weight of the critic term in the generator loss.
    pub lambda: f64,
    /// Critic steps per outer iteration.
    pub critic_steps: usize,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_weight: f64,
    pub critic_hidden: Vec<usize>,
    /// Differentiate the critic term exactly instead of folding it into the
    /// forward-difference estimate.
    pub exact_critic_term: bool,
    /// Seed inputs drawn from the training split when none are supplied.
    pub seed_examples: usize,
}

impl Default for PdConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            critic_steps: 10,
            lr_critic: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            gp_weight: 10.0,
            critic_hidden: vec![64, 64],
            exact_critic_term: false,
            seed_examples: 100,
        }
    }
}

impl PdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(
                "lambda must be finite and non-negative".into(),
            ));
        }
        if !(self.gp_weight >= 0.0) || !(self.lr_critic >= 0.0) {
            return Err(Error::Config(
                "gp_weight and lr_critic must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Scalar critic `R^d -> R` without an output nonlinearity.
pub fn make_critic<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Result<Model> {
    Model::mlp(dim, hidden, 1, LayerSpec::Relu, None, rng)
}

/// Terms of the critic objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLoss {
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: f64,
    /// `gp_weight * mean (|grad D(x_hat)| - 1)^2`.
    pub penalty: f64,
    pub total: f64,
}

/// Critic loss and its parameter gradients. `alpha[r]` mixes row `r` of the
/// interpolate as `alpha * real + (1 - alpha) * fake`.
pub fn critic_loss_grads(
    critic: &mut Model,
    real: &Tensor,
    fake: &Tensor,
    alpha: &[f64],
    gp_weight: f64,
) -> Result<(CriticLoss, ParamGrads)> {
    if real.shape() != fake.shape() || alpha.len() != real.rows() {
        return Err(Error::Shape {
            context: "critic loss batches".into(),
            expected: real.shape().to_vec(),
            got: fake.shape().to_vec(),
        });
    }
    let mut mixed = real.clone();
    for (r, &a) in alpha.iter().enumerate() {
        for (m, f) in mixed.row_mut(r).iter_mut().zip(fake.row(r)) {
            *m = a * *m + (1.0 - a) * f;
        }
    }
    let mut g = Graph::new();
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let mv = g.constant(mixed);
    let tr = critic.forward_graph(&mut g, rv)?;
    let tf = critic.forward_graph(&mut g, fv)?;
    let tm = critic.forward_graph(&mut g, mv)?;
    let mr = g.mean_all(tr.output);
    let mf = g.mean_all(tf.output);
    let w = g.sub(mf, mr)?;

    let grad = critic.input_gradient_graph(&mut g, &tm)?;
    let sq = g.square(grad);
    let s = g.sum_rows(sq);
    let norm = g.sqrt(s)?;
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.square(dev);
    let gp = g.mean_all(dev2);
    let penalty = g.scale(gp, gp_weight);
    let total = g.add(w, penalty)?;

    let loss = CriticLoss {
        wasserstein: g.value(w).item(),
        penalty: g.value(penalty).item(),
        total: g.value(total).item(),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    let grads = g.backward(total)?;
    let mut out = tr.param_grads(&g, &grads);
    for t in [&tf, &tm] {
        for (name, gr) in t.param_grads(&g, &grads) {
            out.get_mut(&name)
                .expect("same parameters")
                .add_assign(&gr)?;
        }
    }
    Ok((loss, out))
}

/// Critic objective on a batch, drawing interpolation weights from `rng`.
pub fn critic_loss<R: Rng + ?Sized>(
    critic: &Model,
    real: &Tensor,
    fake: &Tensor,
    gp_weight: f64,
    rng: &mut R,
) -> Result<CriticLoss> {
    let alpha: Vec<f64> = (0..real.rows()).map(|_| rng.random::<f64>()).collect();
    let mut c = critic.clone();
    Ok(critic_loss_grads(&mut c, real, fake, &alpha, gp_weight)?.0)
}

/// Per-row generator loss `-KL(y_t || y_c) - lambda * D(x)`.
pub fn generator_loss_pd(
    y_t: &Tensor,
    y_c: &Tensor,
    critic_scores: &Tensor,
    lambda: f64,
) -> Result<Vec<f64>> {
    if critic_scores.rows() != y_t.rows() || critic_scores.cols() != 1 {
        return Err(Error::Shape {
            context: "critic scores".into(),
            expected: vec![y_t.rows(), 1],
            got: critic_scores.shape().to_vec(),
        });
    }
    let mut l = disagreement(y_t, y_c);
    if lambda != 0.0 {
        l.iter_mut()
            .zip(critic_scores.data())
            .for_each(|(v, d)| *v -= lambda * d);
    }
    Ok(l)
}

/// Critic, its optimiser and sampling streams, plugged into the attack loop
/// as the extra generator-loss term.
pub struct CriticTerm {
    pub critic: Model,
    opt: Adam,
    cfg: PdConfig,
    seeds: SeedSet,
    batch_size: usize,
    latent_dim: usize,
    batch_rng: RunRng,
    interp_rng: RunRng,
    pub history: Vec<CriticLoss>,
}

impl CriticTerm {
    pub fn new(seeds: SeedSet, cfg: PdConfig, attack: &AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let critic = make_critic(
            seeds.dim(),
            &cfg.critic_hidden,
            &mut stream(attack.seed, Stream::CriticInit),
        )?;
        Ok(Self {
            critic,
            opt: Adam::new(cfg.lr_critic, cfg.beta1, cfg.beta2, 1e-8),
            seeds,
            batch_size: attack.batch_size,
            latent_dim: attack.latent_dim,
            batch_rng: stream(attack.seed, Stream::CriticBatch),
            interp_rng: stream(attack.seed, Stream::Interpolation),
            history: Vec::new(),
            cfg,
        })
    }

    /// `critic_steps` critic updates against fresh generator samples.
    pub fn critic_phase(&mut self, generator: &Generator) -> Result<()> {
        for _ in 0..self.cfg.critic_steps {
            let b = self.batch_size;
            let z_data = (0..b * self.latent_dim)
                .map(|_| self.batch_rng.sample(StandardNormal))
                .collect();
            let z = Tensor::matrix(b, self.latent_dim, z_data)?;
            let fake = generator.generate(&z)?;
            let real = self.seeds.sample(b, &mut self.batch_rng);
            let alpha: Vec<f64> = (0..b).map(|_| self.interp_rng.random::<f64>()).collect();
            let (loss, grads) =
                critic_loss_grads(&mut self.critic, &real, &fake, &alpha, self.cfg.gp_weight)?;
            self.opt.step(&mut self.critic, &grads)?;
            self.history.push(loss);
        }
        Ok(())
    }
}

impl GeneratorTerm for CriticTerm {
    fn folded(&self, x: &Tensor) -> Result<Option<Vec<f64>>> {
        if self.cfg.exact_critic_term || self.cfg.lambda == 0.0 {
            return Ok(None);
        }
        let d = self.critic.forward(x)?;
        Ok(Some(
            d.data().iter().map(|v| -self.cfg.lambda * v).collect(),
        ))
    }

    fn exact(&mut self, xp: &Tensor) -> Result<Option<(Vec<f64>, Tensor)>> {
        if !self.cfg.exact_critic_term || self.cfg.lambda == 0.0 {
            return Ok(None);
        }
        let mut g = Graph::new();
        let xv = g.param(xp.clone());
        let x = g.tanh(xv);
        let t = self.critic.forward_graph(&mut g, x)?;
        let values: Vec<f64> = g
            .value(t.output)
            .data()
            .iter()
            .map(|v| -self.cfg.lambda * v)
            .collect();
        let s = g.sum_all(t.output);
        let loss = g.scale(s, -self.cfg.lambda);
        let mut grads = g.backward(loss)?;
        let grad = grads
            .take(xv)
            .ok_or_else(|| Error::MissingGradient("critic input".into()))?;
        Ok(Some((values, grad)))
    }

    fn after_iteration(&mut self, generator: &Generator) -> Result<()> {
        self.critic_phase(generator)
    }
}

#[derive(Debug, Clone)]
pub struct PdOutcome {
    pub attack: AttackOutcome,
    pub critic: Model,
    pub critic_history: Vec<CriticLoss>,
}

/// Data-free loop plus the critic term and critic phase.
pub fn run_maze_pd<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    seeds: &SeedSet,
    cfg: &AttackConfig,
    pd: &PdConfig,
    eval: &EvalSet,
) -> Result<PdOutcome> {
    if seeds.dim() != oracle.input_dim() {
        return Err(Error::Invalid(format!(
            "seed inputs have {} features, the oracle expects {}",
            seeds.dim(),
            oracle.input_dim()
        )));
    }
    let mut term = CriticTerm::new(seeds.clone(), pd.clone(), cfg)?;
    let attack =
        Attack::new(oracle, cfg.clone())?.run(eval, &mut GradientSource::ZerothOrder, &mut term)?;
    Ok(PdOutcome {
        attack,
        critic: term.critic,
        critic_history: term.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_critic(w: &[f64], b: f64) -> Model {
        let weight = Tensor::matrix(w.len(), 1, w.to_vec()).unwrap();
        Model::from_layers(
            w.len(),
            vec![Layer::Linear {
                weight,
                bias: Tensor::scalar(b),
            }],
        )
        .unwrap()
    }

    #[test]
    fn constant_critic_penalty_is_gp_weight() {
        let mut c = linear_critic(&[0.0, 0.0, 0.0], 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let real = Tensor::uniform(6, 3, -1.0, 1.0, &mut rng);
        let fake = Tensor::uniform(6, 3, -1.0, 1.0, &mut rng);
        let (l, _) = critic_loss_grads(&mut c, &real, &fake, &[0.5; 6], 10.0).unwrap();
        assert_eq!(l.penalty, 10.0);
        assert_eq!(l.wasserstein, 0.0);
    }

    #[test]
    fn identical_batches_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = make_critic(4, &[5], &mut rng).unwrap();
        let x = Tensor::uniform(7, 4, -1.0, 1.0, &mut rng);
        let (l, _) = critic_loss_grads(&mut c, &x, &x, &[0.3; 7], 10.0).unwrap();
        assert_eq!(l.wasserstein, 0.0);
    }

    #[test]
    fn seed_set_binary_round_trip() {
        let x = Tensor::uniform(5, 3, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let s = SeedSet::new(x).unwrap();
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 15 * 8);
        assert_eq!(SeedSet::read_binary(&buf[..]).unwrap(), s);
        buf.pop();
        assert!(SeedSet::read_binary(&buf[..]).is_err());
        assert!(SeedSet::new(Tensor::full(&[1, 2], 1.5)).is_err());
    }

    #[test]
    fn zero_lambda_reduces_to_disagreement() {
        let y_t = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.4, 0.6]).unwrap();
        let y_c = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.2, 0.8]).unwrap();
        let d = Tensor::matrix(2, 1, vec![3.0, -1.0]).unwrap();
        assert_eq!(
            generator_loss_pd(&y_t, &y_c, &d, 0.0).unwrap(),
            disagreement(&y_t, &y_c)
        );
        let same = generator_loss_pd(&y_t, &y_t, &d, 10.0).unwrap();
        assert_eq!(same, vec![-30.0, 10.0]);
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = make_critic(3, &[4], &mut rng).unwrap();
        let real = Tensor::uniform(5, 3, -1.0, 1.0, &mut rng);
        let fake = Tensor::uniform(5, 3, -1.0, 1.0, &mut rng);
        let alpha = [0.1, 0.5, 0.9, 0.3, 0.7];
        let (_, grads) = critic_loss_grads(&mut c, &real, &fake, &alpha, 10.0).unwrap();
        let h = 1e-6;
        for (name, g) in &grads {
            for i in 0..g.numel() {
                let eval = |delta: f64| {
                    let mut m = c.clone();
                    for (n, p) in m.params_mut() {
                        if &n == name {
                            p.data_mut()[i] += delta;
                        }
                    }
                    critic_loss_grads(&mut m, &real, &fake, &alpha, 10.0)
                        .unwrap()
                        .0
                        .total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                    "{name}[{i}]: {fd} vs {an}"
                );
            }
        }
    }
}
