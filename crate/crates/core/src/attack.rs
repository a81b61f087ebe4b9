//! The data-free attack loop.
//!
//! Every outer iteration runs a generator phase (disagreement maximisation
//! with estimated gradients), a clone phase (distillation on fresh queries)
//! and a replay phase (distillation on stored pairs, no queries). Only whole
//! iterations are started, so the ledger ends at an exact multiple of the
//! per-iteration cost.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{inject_and_backprop, Generator};
use crate::graph::Graph;
use crate::loss::kl_rows;
use crate::metrics::normalized_accuracy;
use crate::nn::{LayerSpec, Model};
use crate::optim::{CosineSchedule, Sgd};
use crate::oracle::{query_cost_per_iteration, SoftLabelOracle};
use crate::rng::{stream, RunRng, Stream};
use crate::tensor::Tensor;
use crate::train::{accuracy, distill_grads};
use crate::zo::{cosine_similarity, estimate_grad, ZoConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Query budget `Q`.
    pub budget: u64,
    pub epsilon: f64,
    /// Directions `m` per generated sample.
    pub directions: usize,
    pub batch_size: usize,
    pub gen_steps: usize,
    pub clone_steps: usize,
    pub replay_steps: usize,
    pub lr_generator: f64,
    pub generator_momentum: f64,
    pub lr_clone: f64,
    pub clone_momentum: f64,
    pub latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub clone_hidden: Vec<usize>,
    pub seed: u64,
    /// Log a row every this many outer iterations (plus the final one).
    pub checkpoint_every: u64,
    /// Optional cap on stored replay pairs; `None` keeps everything.
    pub replay_capacity: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            budget: 200_000,
            epsilon: 1e-3,
            directions: 10,
            batch_size: 128,
            gen_steps: 1,
            clone_steps: 5,
            replay_steps: 10,
            lr_generator: 1e-2,
            generator_momentum: 0.0,
            lr_clone: 0.1,
            clone_momentum: 0.9,
            latent_dim: 16,
            generator_hidden: vec![64, 64],
            clone_hidden: vec![64, 64],
            seed: 0,
            checkpoint_every: 50,
            replay_capacity: None,
        }
    }
}

impl AttackConfig {
    pub fn zo(&self) -> ZoConfig {
        ZoConfig {
            epsilon: self.epsilon,
            directions: self.directions,
        }
    }

    pub fn iteration_cost(&self) -> u64 {
        query_cost_per_iteration(
            self.batch_size as u64,
            self.gen_steps as u64,
            self.directions as u64,
            self.clone_steps as u64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.gen_steps > 0 {
            self.zo()
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.gen_steps + self.clone_steps == 0 {
            return Err(Error::Config(
                "gen_steps and clone_steps are both 0, an iteration would cost no queries".into(),
            ));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_clone", self.lr_clone),
            ("generator_momentum", self.generator_momentum),
            ("clone_momentum", self.clone_momentum),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number"
                )));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.replay_capacity == Some(0) {
            return Err(Error::Config(
                "replay_capacity must be positive when set".into(),
            ));
        }
        Ok(())
    }

    /// Outer iterations that fit in the budget.
    pub fn planned_iterations(&self) -> u64 {
        self.budget / self.iteration_cost().max(1)
    }
}

/// Held-out labelled inputs for measuring clone accuracy. Never queried.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub target_accuracy: f64,
}

impl EvalSet {
    pub fn new(x: Tensor, y: Vec<usize>, target_accuracy: f64) -> Result<Self> {
        if x.rows() != y.len() || y.is_empty() {
            return Err(Error::Invalid(
                "evaluation set needs one label per row".into(),
            ));
        }
        if !(target_accuracy > 0.0) {
            return Err(Error::Invalid("target accuracy must be positive".into()));
        }
        Ok(Self {
            x,
            y,
            target_accuracy,
        })
    }

    pub fn clone_accuracy(&self, clone: &Model) -> Result<f64> {
        accuracy(clone, &self.x, &self.y)
    }
}

/// Stored `(x, T(x))` pairs.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    dim: usize,
    classes: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    capacity: Option<usize>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(dim: usize, classes: usize, capacity: Option<usize>) -> Self {
        Self {
            dim,
            classes,
            xs: Vec::new(),
            ys: Vec::new(),
            capacity,
            seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Total pairs ever offered, including evicted ones.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Appends every row. With a capacity, a full buffer overwrites a
    /// uniformly chosen slot (reservoir sampling).
    pub fn extend<R: Rng + ?Sized>(&mut self, x: &Tensor, y: &Tensor, rng: &mut R) -> Result<()> {
        if x.rows() != y.rows() || x.cols() != self.dim || y.cols() != self.classes {
            return Err(Error::Shape {
                context: "replay buffer append".into(),
                expected: vec![x.rows(), self.dim, self.classes],
                got: vec![y.rows(), x.cols(), y.cols()],
            });
        }
        for r in 0..x.rows() {
            self.seen += 1;
            match self.capacity {
                Some(cap) if self.len() >= cap => {
                    let j = rng.random_range(0..self.seen);
                    if (j as usize) < cap {
                        let j = j as usize;
                        self.xs[j * self.dim..(j + 1) * self.dim].copy_from_slice(x.row(r));
                        self.ys[j * self.classes..(j + 1) * self.classes].copy_from_slice(y.row(r));
                    }
                }
                _ => {
                    self.xs.extend_from_slice(x.row(r));
                    self.ys.extend_from_slice(y.row(r));
                }
            }
        }
        Ok(())
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len() * self.classes);
        for &i in idx {
            x.extend_from_slice(&self.xs[i * self.dim..(i + 1) * self.dim]);
            y.extend_from_slice(&self.ys[i * self.classes..(i + 1) * self.classes]);
        }
        (
            Tensor::from_parts(idx.len(), self.dim, x),
            Tensor::from_parts(idx.len(), self.classes, y),
        )
    }

    pub fn inputs(&self) -> Tensor {
        Tensor::from_parts(self.len(), self.dim, self.xs.clone())
    }

    pub fn labels(&self) -> Tensor {
        Tensor::from_parts(self.len(), self.classes, self.ys.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub q: u64,
    pub clone_acc: f64,
    pub norm_acc: f64,
    pub loss_c: f64,
    pub loss_g: f64,
    pub eta_c: f64,
    pub eta_g: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_COLUMNS: [&str; 7] = [
    "q",
    "clone_acc",
    "norm_acc",
    "loss_c",
    "loss_g",
    "eta_c",
    "eta_g",
];

impl AttackLog {
    /// Appends a row; rows must have strictly increasing `q`.
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.q <= last.q {
                return Err(Error::Invalid(format!(
                    "log rows must have increasing q ({} after {})",
                    row.q, last.q
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(LOG_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                r.q.to_string(),
                r.clone_acc.to_string(),
                r.norm_acc.to_string(),
                r.loss_c.to_string(),
                r.loss_g.to_string(),
                r.eta_c.to_string(),
                r.eta_g.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut log = AttackLog::default();
        for rec in rdr.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Invalid(format!("bad log field {}", LOG_COLUMNS[i])))
            };
            log.push(LogRow {
                q: f(0)? as u64,
                clone_acc: f(1)?,
                norm_acc: f(2)?,
                loss_c: f(3)?,
                loss_g: f(4)?,
                eta_c: f(5)?,
                eta_g: f(6)?,
            })?;
        }
        Ok(log)
    }
}

/// Where the generator's input-space gradient comes from.
#[derive(Debug, Clone)]
pub enum GradientSource {
    /// Forward differences through the oracle.
    ZerothOrder,
    /// Exact backpropagation through a white-box copy of the target. The
    /// oracle is still queried with the same batches so the budget is spent
    /// identically.
    WhiteBox(Model),
}

/// An extra additive term in the generator loss, plus work done after each
/// outer iteration. Used by the partial-data variant.
pub trait GeneratorTerm: Sync {
    /// Per-row term added inside the estimated loss at queries `x`.
    fn folded(&self, x: &Tensor) -> Result<Option<Vec<f64>>>;

    /// Exact gradient of the per-row term with respect to the pre-activation
    /// `x_p`, for terms kept out of the estimate.
    fn exact(&mut self, xp: &Tensor) -> Result<Option<(Vec<f64>, Tensor)>>;

    fn after_iteration(&mut self, generator: &Generator) -> Result<()>;
}

/// The plain disagreement objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoTerm;

impl GeneratorTerm for NoTerm {
    fn folded(&self, _x: &Tensor) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    fn exact(&mut self, _xp: &Tensor) -> Result<Option<(Vec<f64>, Tensor)>> {
        Ok(None)
    }

    fn after_iteration(&mut self, _generator: &Generator) -> Result<()> {
        Ok(())
    }
}

/// Per-row `-KL(y_t || y_c)`.
pub fn disagreement(y_t: &Tensor, y_c: &Tensor) -> Vec<f64> {
    kl_rows(y_t, y_c).data().iter().map(|v| -v).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseStats {
    pub steps: usize,
    pub queries: u64,
    pub mean_loss: f64,
    /// Set when the oracle refused a batch for lack of budget.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub clone: Model,
    pub generator: Generator,
    pub log: AttackLog,
    pub iterations: u64,
    pub queries: u64,
    /// White-box runs only: cosine similarity between the estimated and the
    /// exact input-space gradient, one value per generator step.
    pub estimator_cosine: Vec<f64>,
}

/// Mutable attack state. The phases can be driven individually; [`run`]
/// strings them together.
///
/// [`run`]: Attack::run
pub struct Attack<'a, O: SoftLabelOracle + ?Sized> {
    oracle: &'a O,
    cfg: AttackConfig,
    pub generator: Generator,
    pub clone: Model,
    pub buffer: ReplayBuffer,
    gen_opt: Sgd,
    clone_opt: Sgd,
    latent_rng: RunRng,
    dir_rng: RunRng,
    replay_rng: RunRng,
    estimator_cosine: Vec<f64>,
}

impl<'a, O: SoftLabelOracle + ?Sized> Attack<'a, O> {
    pub fn new(oracle: &'a O, cfg: AttackConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, k) = (oracle.input_dim(), oracle.output_dim());
        let generator = Generator::new(
            cfg.latent_dim,
            &cfg.generator_hidden,
            d,
            &mut stream(cfg.seed, Stream::GeneratorInit),
        )?;
        let clone = Model::mlp(
            d,
            &cfg.clone_hidden,
            k,
            LayerSpec::Relu,
            Some(LayerSpec::Softmax),
            &mut stream(cfg.seed, Stream::CloneInit),
        )?;
        Ok(Self {
            oracle,
            generator,
            clone,
            buffer: ReplayBuffer::new(d, k, cfg.replay_capacity),
            gen_opt: Sgd::new(cfg.lr_generator, cfg.generator_momentum),
            clone_opt: Sgd::new(cfg.lr_clone, cfg.clone_momentum),
            latent_rng: stream(cfg.seed, Stream::Latent),
            dir_rng: stream(cfg.seed, Stream::Directions),
            replay_rng: stream(cfg.seed, Stream::Replay),
            estimator_cosine: Vec::new(),
            cfg,
        })
    }

    /// Replaces the initial clone (it must map the oracle's input and output
    /// widths and end in a softmax).
    pub fn with_clone(mut self, clone: Model) -> Result<Self> {
        if clone.input_dim() != self.oracle.input_dim()
            || clone.output_dim() != self.oracle.output_dim()
            || !clone.ends_with(LayerSpec::Softmax)
        {
            return Err(Error::Invalid(
                "clone must match the oracle and end in softmax".into(),
            ));
        }
        self.clone = clone;
        Ok(self)
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    fn latent(&mut self) -> Tensor {
        let (b, k) = (self.cfg.batch_size, self.cfg.latent_dim);
        let data = (0..b * k)
            .map(|_| self.latent_rng.sample(StandardNormal))
            .collect();
        Tensor::from_parts(b, k, data)
    }

    /// `gen_steps` generator updates at learning rate `eta`.
    pub fn generator_phase(
        &mut self,
        eta: f64,
        source: &mut GradientSource,
        term: &mut dyn GeneratorTerm,
    ) -> Result<PhaseStats> {
        let mut stats = PhaseStats::default();
        let mut loss_sum = 0.0;
        self.gen_opt.set_lr(eta);
        for _ in 0..self.cfg.gen_steps {
            let z = self.latent();
            let mut g = Graph::new();
            let trace = self.generator.record(&mut g, &z)?;
            let xp = g.value(trace.pre_activation).clone();
            let b = xp.rows();

            let exact_term = term.exact(&xp)?;
            let oracle = self.oracle;
            let clone = &self.clone;
            let folded: &dyn GeneratorTerm = term;
            let loss_at = |xp: &Tensor| -> Result<Vec<f64>> {
                let x = xp.map(f64::tanh);
                let y_t = oracle.query(&x)?;
                let y_c = clone.forward(&x)?;
                let mut l = disagreement(&y_t, &y_c);
                if let Some(extra) = folded.folded(&x)? {
                    l.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
                }
                Ok(l)
            };
            let est = match estimate_grad(loss_at, &xp, &self.cfg.zo(), &mut self.dir_rng) {
                Ok(e) => e,
                Err(e) if e.is_budget_exhausted() => {
                    stats.truncated = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            stats.queries += est.queries_spent;
            let mut ghat = match source {
                GradientSource::ZerothOrder => est.ghat.clone(),
                GradientSource::WhiteBox(target) => {
                    let exact = whitebox_gradient(target, &self.clone, &xp)?;
                    self.estimator_cosine
                        .push(cosine_similarity(&est.ghat, &exact)?);
                    exact
                }
            };
            let mut base = est.base_loss.clone();
            if let Some((values, grad)) = exact_term {
                ghat.add_assign(&grad)?;
                base.iter_mut().zip(values).for_each(|(a, v)| *a += v);
            }
            loss_sum += base.iter().sum::<f64>() / b as f64;

            // The objective is the batch mean of the per-row losses.
            let grads = inject_and_backprop(&g, &trace, &ghat.scale(1.0 / b as f64))?;
            self.gen_opt.step(self.generator.model_mut(), &grads)?;
            stats.steps += 1;
        }
        stats.mean_loss = mean_or_nan(loss_sum, stats.steps);
        Ok(stats)
    }

    /// `clone_steps` distillation steps on freshly generated, freshly
    /// labelled batches, which are also stored for replay.
    pub fn clone_phase(&mut self, eta: f64) -> Result<PhaseStats> {
        let mut stats = PhaseStats::default();
        let mut loss_sum = 0.0;
        self.clone_opt.set_lr(eta);
        for _ in 0..self.cfg.clone_steps {
            let z = self.latent();
            let x = self.generator.generate(&z)?;
            let y_t = match self.oracle.query(&x) {
                Ok(y) => y,
                Err(e) if e.is_budget_exhausted() => {
                    stats.truncated = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            stats.queries += x.rows() as u64;
            let (loss, grads) = distill_grads(&mut self.clone, &x, &y_t)?;
            self.clone_opt.step(&mut self.clone, &grads)?;
            self.buffer.extend(&x, &y_t, &mut self.replay_rng)?;
            loss_sum += loss;
            stats.steps += 1;
        }
        stats.mean_loss = mean_or_nan(loss_sum, stats.steps);
        Ok(stats)
    }

    /// `replay_steps` distillation steps on stored pairs. Minibatches are
    /// drawn without replacement from a fresh permutation, which is redrawn
    /// whenever it runs out.
    pub fn replay_phase(&mut self, eta: f64) -> Result<PhaseStats> {
        let mut stats = PhaseStats::default();
        let n = self.buffer.len();
        if n == 0 || self.cfg.replay_steps == 0 {
            return Ok(PhaseStats {
                mean_loss: f64::NAN,
                ..stats
            });
        }
        self.clone_opt.set_lr(eta);
        let b = self.cfg.batch_size.min(n);
        let mut order: Vec<usize> = Vec::new();
        let mut pos = 0;
        let mut loss_sum = 0.0;
        for _ in 0..self.cfg.replay_steps {
            if pos + b > order.len() {
                order = (0..n).collect();
                order.shuffle(&mut self.replay_rng);
                pos = 0;
            }
            let (x, y) = self.buffer.batch(&order[pos..pos + b]);
            pos += b;
            let (loss, grads) = distill_grads(&mut self.clone, &x, &y)?;
            self.clone_opt.step(&mut self.clone, &grads)?;
            loss_sum += loss;
            stats.steps += 1;
        }
        stats.mean_loss = mean_or_nan(loss_sum, stats.steps);
        Ok(stats)
    }

    fn log_row(
        &self,
        eval: &EvalSet,
        loss_c: f64,
        loss_g: f64,
        eta_c: f64,
        eta_g: f64,
    ) -> Result<LogRow> {
        let clone_acc = eval.clone_accuracy(&self.clone)?;
        Ok(LogRow {
            q: self.oracle.ledger().used,
            clone_acc,
            norm_acc: normalized_accuracy(clone_acc, eval.target_accuracy)?,
            loss_c,
            loss_g,
            eta_c,
            eta_g,
        })
    }

    /// Runs whole outer iterations while the remaining budget covers one.
    pub fn run(
        mut self,
        eval: &EvalSet,
        source: &mut GradientSource,
        term: &mut dyn GeneratorTerm,
    ) -> Result<AttackOutcome> {
        let cost = self.cfg.iteration_cost();
        let start = self.oracle.ledger();
        let budget_left = start.remaining().min(self.cfg.budget);
        let planned = budget_left / cost;
        let stop_at = start.used + planned * cost;
        let mut log = AttackLog::default();
        log.rows.push(self.log_row(
            eval,
            f64::NAN,
            f64::NAN,
            self.cfg.lr_clone,
            self.cfg.lr_generator,
        )?);

        let schedules = if planned > 0 {
            Some((
                CosineSchedule::new(self.cfg.lr_clone, planned)?,
                CosineSchedule::new(self.cfg.lr_generator, planned)?,
            ))
        } else {
            None
        };
        let mut iterations = 0u64;
        let mut last_logged = 0u64;
        let mut last = (f64::NAN, f64::NAN, self.cfg.lr_clone, self.cfg.lr_generator);
        while let Some((sched_c, sched_g)) = &schedules {
            if iterations >= planned || self.oracle.ledger().used + cost > stop_at {
                break;
            }
            let eta_c = sched_c.lr(iterations)?;
            let eta_g = sched_g.lr(iterations)?;
            let gen = self.generator_phase(eta_g, source, term)?;
            let cl = self.clone_phase(eta_c)?;
            if gen.truncated || cl.truncated {
                break;
            }
            self.replay_phase(eta_c)?;
            term.after_iteration(&self.generator)?;
            iterations += 1;
            last = (cl.mean_loss, gen.mean_loss, eta_c, eta_g);
            if iterations.is_multiple_of(self.cfg.checkpoint_every) {
                log.push(self.log_row(eval, last.0, last.1, last.2, last.3)?)?;
                last_logged = iterations;
            }
        }
        if iterations > last_logged {
            log.push(self.log_row(eval, last.0, last.1, last.2, last.3)?)?;
        }
        Ok(AttackOutcome {
            queries: self.oracle.ledger().used - start.used,
            clone: self.clone,
            generator: self.generator,
            log,
            iterations,
            estimator_cosine: self.estimator_cosine,
        })
    }
}

fn mean_or_nan(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Exact per-row gradient of `-KL(T(tanh x_p) || C(tanh x_p))` with respect
/// to `x_p`.
pub fn whitebox_gradient(target: &mut Model, clone: &Model, xp: &Tensor) -> Result<Tensor> {
    let mut clone = clone.clone();
    let mut g = Graph::new();
    let xp_var = g.param(xp.clone());
    let x = g.tanh(xp_var);
    let t = target.forward_graph(&mut g, x)?;
    let c = clone.forward_graph(&mut g, x)?;
    let kl = crate::train::kl_to_output(&mut g, t.output, &c)?;
    let total = g.sum_all(kl);
    let loss = g.scale(total, -1.0);
    let mut grads = g.backward(loss)?;
    grads
        .take(xp_var)
        .ok_or_else(|| Error::MissingGradient("generator pre-activation".into()))
}

/// Data-free extraction against a black-box oracle.
pub fn run_maze<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    cfg: &AttackConfig,
    eval: &EvalSet,
) -> Result<AttackOutcome> {
    Attack::new(oracle, cfg.clone())?.run(eval, &mut GradientSource::ZerothOrder, &mut NoTerm)
}

/// The same loop with exact generator gradients from a white-box target.
/// `oracle` must wrap the same model; it is still used for every query so
/// that the budget is spent exactly as in [`run_maze`].
pub fn run_maze_whitebox<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    target: &Model,
    cfg: &AttackConfig,
    eval: &EvalSet,
) -> Result<AttackOutcome> {
    if target.input_dim() != oracle.input_dim() || target.output_dim() != oracle.output_dim() {
        return Err(Error::Invalid(
            "white-box target does not match the oracle".into(),
        ));
    }
    let mut source = GradientSource::WhiteBox(target.clone());
    Attack::new(oracle, cfg.clone())?.run(eval, &mut source, &mut NoTerm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::BlackBoxOracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_target(d: usize, k: usize, seed: u64) -> Model {
        Model::mlp(
            d,
            &[8],
            k,
            LayerSpec::Tanh,
            Some(LayerSpec::Softmax),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn small_cfg() -> AttackConfig {
        AttackConfig {
            batch_size: 8,
            directions: 3,
            latent_dim: 4,
            generator_hidden: vec![8],
            clone_hidden: vec![8],
            ..AttackConfig::default()
        }
    }

    fn eval_set(d: usize) -> EvalSet {
        let x = Tensor::uniform(20, d, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        EvalSet::new(x, vec![0; 20], 1.0).unwrap()
    }

    #[test]
    fn default_iteration_cost() {
        assert_eq!(AttackConfig::default().iteration_cost(), 2048);
    }

    #[test]
    fn phase_query_counts() {
        let oracle = BlackBoxOracle::with_budget(small_target(5, 3, 0), 10_000).unwrap();
        let cfg = AttackConfig {
            clone_steps: 4,
            ..small_cfg()
        };
        let mut a = Attack::new(&oracle, cfg).unwrap();
        let s = a
            .generator_phase(1e-3, &mut GradientSource::ZerothOrder, &mut NoTerm)
            .unwrap();
        assert_eq!(s.queries, 8 * 4);
        assert_eq!(oracle.ledger().used, 32);
        let s = a.clone_phase(0.1).unwrap();
        assert_eq!(s.queries, 32);
        assert_eq!(a.buffer.len(), 32);
        let before = oracle.ledger();
        a.replay_phase(0.1).unwrap();
        assert_eq!(oracle.ledger(), before);
    }

    #[test]
    fn zero_generator_steps_leave_generator_alone() {
        let oracle = BlackBoxOracle::with_budget(small_target(5, 3, 0), 10_000).unwrap();
        let mut a = Attack::new(
            &oracle,
            AttackConfig {
                gen_steps: 0,
                ..small_cfg()
            },
        )
        .unwrap();
        let before = a.generator.clone();
        let s = a
            .generator_phase(1.0, &mut GradientSource::ZerothOrder, &mut NoTerm)
            .unwrap();
        assert_eq!(s.queries, 0);
        assert_eq!(a.generator, before);
        assert_eq!(oracle.ledger().used, 0);
    }

    #[test]
    fn truncation_flag_on_exhausted_budget() {
        let oracle = BlackBoxOracle::with_budget(small_target(5, 3, 0), 20).unwrap();
        let mut a = Attack::new(&oracle, small_cfg()).unwrap();
        let s = a
            .generator_phase(1e-3, &mut GradientSource::ZerothOrder, &mut NoTerm)
            .unwrap();
        assert!(s.truncated);
        assert_eq!(s.steps, 0);
    }

    #[test]
    fn replay_without_steps_or_data_is_a_no_op() {
        let oracle = BlackBoxOracle::with_budget(small_target(5, 3, 0), 10_000).unwrap();
        let mut a = Attack::new(&oracle, small_cfg()).unwrap();
        let before = a.clone.clone();
        a.replay_phase(0.1).unwrap();
        assert_eq!(a.clone, before);
    }

    #[test]
    fn buffer_capacity_is_respected() {
        let mut buf = ReplayBuffer::new(2, 2, Some(5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(&[4, 2]);
        let y = Tensor::full(&[4, 2], 0.5);
        for _ in 0..3 {
            buf.extend(&x, &y, &mut rng).unwrap();
        }
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.seen(), 12);
        assert!(buf.extend(&Tensor::zeros(&[1, 3]), &y, &mut rng).is_err());
    }

    #[test]
    fn log_requires_increasing_q() {
        let row = |q| LogRow {
            q,
            clone_acc: 0.5,
            norm_acc: 0.5,
            loss_c: 0.1,
            loss_g: -0.1,
            eta_c: 0.1,
            eta_g: 1e-4,
        };
        let mut log = AttackLog::default();
        log.push(row(0)).unwrap();
        log.push(row(10)).unwrap();
        assert!(log.push(row(10)).is_err());
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("q,clone_acc,norm_acc,loss_c,loss_g,eta_c,eta_g\n0,"));
        assert_eq!(AttackLog::read_csv(&buf[..]).unwrap(), log);
    }

    #[test]
    fn budget_below_one_iteration_runs_nothing() {
        let oracle = BlackBoxOracle::with_budget(small_target(5, 3, 0), 10_000).unwrap();
        let cfg = AttackConfig {
            budget: small_cfg().iteration_cost() - 1,
            ..small_cfg()
        };
        let a = Attack::new(&oracle, cfg.clone()).unwrap();
        let init = a.clone.clone();
        let out = run_maze(&oracle, &cfg, &eval_set(5)).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.queries, 0);
        assert_eq!(out.clone, init);
        assert_eq!(out.log.rows.len(), 1);
        assert_eq!(out.log.rows[0].q, 0);
    }

    #[test]
    fn whitebox_gradient_matches_finite_differences() {
        let mut target = small_target(3, 2, 4);
        let clone = small_target(3, 2, 5);
        let xp = Tensor::uniform(2, 3, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let g = whitebox_gradient(&mut target, &clone, &xp).unwrap();
        let f = |x: &Tensor| -> f64 {
            let t = x.map(f64::tanh);
            disagreement(&target.forward(&t).unwrap(), &clone.forward(&t).unwrap())
                .iter()
                .sum()
        };
        let h = 1e-6;
        for i in 0..xp.numel() {
            let mut p = xp.clone();
            p.data_mut()[i] += h;
            let mut m = xp.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6, "{fd} vs {}", g.data()[i]);
        }
    }
}
