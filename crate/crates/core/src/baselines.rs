//! Comparison attacks on the same oracle: Jacobian-based dataset
//! augmentation (JBDA), uniform noise queries, and labelling a surrogate
//! dataset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackLog, EvalSet, LogRow, ReplayBuffer};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::one_hot;
use crate::metrics::normalized_accuracy;
use crate::nn::{LayerSpec, Model};
use crate::optim::{Adam, CosineSchedule, Sgd};
use crate::oracle::{uniform_inputs, SoftLabelOracle};
use crate::pd::SeedSet;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::train::{distill_grads, epoch_batches};

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub clone: Model,
    pub log: AttackLog,
    pub queries: u64,
    /// JBDA only: pool size after the initial labelling and after each round.
    pub pool_sizes: Vec<usize>,
}

fn new_clone<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    hidden: &[usize],
    seed: u64,
) -> Result<Model> {
    Model::mlp(
        oracle.input_dim(),
        hidden,
        oracle.output_dim(),
        LayerSpec::Relu,
        Some(LayerSpec::Softmax),
        &mut stream(seed, Stream::CloneInit),
    )
}

fn row<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    clone: &Model,
    eval: &EvalSet,
    loss_c: f64,
    eta_c: f64,
) -> Result<LogRow> {
    let clone_acc = eval.clone_accuracy(clone)?;
    Ok(LogRow {
        q: oracle.ledger().used,
        clone_acc,
        norm_acc: normalized_accuracy(clone_acc, eval.target_accuracy)?,
        loss_c,
        loss_g: f64::NAN,
        eta_c,
        eta_g: f64::NAN,
    })
}

/// Pushes a row unless the ledger has not moved since the last one.
fn log_if_new(log: &mut AttackLog, r: LogRow) -> Result<()> {
    if log.last().is_some_and(|l| l.q >= r.q) {
        return Ok(());
    }
    log.push(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JbdaConfig {
    pub n_seeds: usize,
    pub rounds: usize,
    pub epochs_per_round: usize,
    /// Perturbation size of the sign step.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub clone_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for JbdaConfig {
    fn default() -> Self {
        Self {
            n_seeds: 100,
            rounds: 6,
            epochs_per_round: 10,
            lambda: 0.1,
            lr: 1e-3,
            batch_size: 64,
            clone_hidden: vec![64, 64],
            seed: 0,
        }
    }
}

/// `clip(x + lambda * sign(d CE(C(x), y) / dx), -1, 1)` with `sign(0) = 0`.
pub fn jbda_augment(clone: &Model, x: &Tensor, labels: &[usize], lambda: f64) -> Result<Tensor> {
    if labels.len() != x.rows() {
        return Err(Error::Invalid("one label per row required".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Invalid("JBDA step must be positive".into()));
    }
    let grad = cross_entropy_input_grad(clone, x, labels)?;
    x.zip_map(&grad, |v, g| {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        (v + lambda * s).clamp(-1.0, 1.0)
    })
}

/// Per-row gradient of `-log C(x)[y]` with respect to `x`.
pub fn cross_entropy_input_grad(clone: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut model = clone.clone();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let t = model.forward_graph(&mut g, xv)?;
    // KL from a one-hot row equals the cross-entropy of that row.
    let target = g.constant(one_hot(labels, model.output_dim())?);
    let kl = crate::train::kl_to_output(&mut g, target, &t)?;
    let total = g.sum_all(kl);
    let mut grads = g.backward(total)?;
    grads
        .take(xv)
        .ok_or_else(|| Error::MissingGradient("JBDA input".into()))
}

fn fit_epochs<R: Rng + ?Sized>(
    clone: &mut Model,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    epochs: usize,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut last = f64::NAN;
    for _ in 0..epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(x.rows(), batch, rng);
        for idx in &batches {
            let (loss, grads) = distill_grads(clone, &x.select_rows(idx), &y.select_rows(idx))?;
            opt.step(clone, &grads)?;
            sum += loss;
        }
        last = sum / batches.len() as f64;
    }
    Ok(last)
}

/// Seed labelling, then `rounds` rounds of augment / label new points /
/// retrain. The clone is trained on the soft labels; the augmentation step
/// uses their argmax.
pub fn run_jbda<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    seeds: &SeedSet,
    cfg: &JbdaConfig,
    eval: &EvalSet,
) -> Result<BaselineOutcome> {
    if cfg.n_seeds == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "n_seeds and batch_size must be positive".into(),
        ));
    }
    let start = oracle.ledger().used;
    let n = cfg.n_seeds.min(seeds.len());
    let idx: Vec<usize> = (0..n).collect();
    let mut pool = seeds.inputs().select_rows(&idx);
    let mut clone = new_clone(oracle, &cfg.clone_hidden, cfg.seed)?;
    let mut opt = Adam::with_lr(cfg.lr);
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let mut log = AttackLog::default();
    log.rows.push(row(oracle, &clone, eval, f64::NAN, cfg.lr)?);

    let mut labels = match oracle.query(&pool) {
        Ok(y) => y,
        Err(e) if e.is_budget_exhausted() => {
            return Ok(BaselineOutcome {
                clone,
                log,
                queries: 0,
                pool_sizes: vec![],
            })
        }
        Err(e) => return Err(e),
    };
    let mut pool_sizes = vec![pool.rows()];
    let loss = fit_epochs(
        &mut clone,
        &mut opt,
        &pool,
        &labels,
        cfg.epochs_per_round,
        cfg.batch_size,
        &mut rng,
    )?;
    log_if_new(&mut log, row(oracle, &clone, eval, loss, cfg.lr)?)?;

    for _ in 0..cfg.rounds {
        let hard = labels.argmax_rows();
        let fresh = jbda_augment(&clone, &pool, &hard, cfg.lambda)?;
        let fresh_y = match oracle.query(&fresh) {
            Ok(y) => y,
            Err(e) if e.is_budget_exhausted() => break,
            Err(e) => return Err(e),
        };
        pool = Tensor::vstack(&[&pool, &fresh])?;
        labels = Tensor::vstack(&[&labels, &fresh_y])?;
        pool_sizes.push(pool.rows());
        let loss = fit_epochs(
            &mut clone,
            &mut opt,
            &pool,
            &labels,
            cfg.epochs_per_round,
            cfg.batch_size,
            &mut rng,
        )?;
        log_if_new(&mut log, row(oracle, &clone, eval, loss, cfg.lr)?)?;
    }
    Ok(BaselineOutcome {
        clone,
        log,
        queries: oracle.ledger().used - start,
        pool_sizes,
    })
}

/// Uniform noise queries with the data-free attack's clone training: one
/// distillation step per fresh batch, and `replay_steps` replay steps after
/// every `clone_steps` batches. The whole budget goes to clone batches; the
/// last batch shrinks so the ledger ends exactly at the budget.
pub fn run_noise<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    cfg: &AttackConfig,
    eval: &EvalSet,
) -> Result<BaselineOutcome> {
    if cfg.batch_size == 0 || cfg.clone_steps == 0 {
        return Err(Error::Config(
            "noise attack needs batch_size and clone_steps >= 1".into(),
        ));
    }
    let start = oracle.ledger();
    let budget = start.remaining().min(cfg.budget);
    let b = cfg.batch_size as u64;
    let total_batches = budget.div_ceil(b);
    let per_iter = cfg.clone_steps as u64;
    let planned = total_batches.div_ceil(per_iter);

    let (d, k) = (oracle.input_dim(), oracle.output_dim());
    let mut clone = new_clone(oracle, &cfg.clone_hidden, cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr_clone, cfg.clone_momentum);
    let mut buffer = ReplayBuffer::new(d, k, cfg.replay_capacity);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    let mut replay_rng = stream(cfg.seed, Stream::Replay);
    let mut log = AttackLog::default();
    log.rows
        .push(row(oracle, &clone, eval, f64::NAN, cfg.lr_clone)?);
    let schedule = if planned > 0 {
        Some(CosineSchedule::new(cfg.lr_clone, planned)?)
    } else {
        None
    };

    let mut spent = 0u64;
    let mut iteration = 0u64;
    let mut last_loss = f64::NAN;
    let mut eta = cfg.lr_clone;
    while let Some(schedule) = &schedule {
        if spent >= budget {
            break;
        }
        eta = schedule.lr(iteration)?;
        opt.set_lr(eta);
        let mut sum = 0.0;
        let mut steps = 0;
        for _ in 0..cfg.clone_steps {
            let rows = b.min(budget - spent);
            if rows == 0 {
                break;
            }
            let x = uniform_inputs(rows as usize, d, &mut noise_rng);
            let y = oracle.query(&x)?;
            spent += rows;
            let (loss, grads) = distill_grads(&mut clone, &x, &y)?;
            opt.step(&mut clone, &grads)?;
            buffer.extend(&x, &y, &mut replay_rng)?;
            sum += loss;
            steps += 1;
        }
        replay(
            &mut clone,
            &mut opt,
            &buffer,
            cfg.replay_steps,
            cfg.batch_size,
            &mut replay_rng,
        )?;
        last_loss = sum / steps.max(1) as f64;
        iteration += 1;
        if iteration.is_multiple_of(cfg.checkpoint_every.max(1)) {
            log_if_new(&mut log, row(oracle, &clone, eval, last_loss, eta)?)?;
        }
    }
    log_if_new(&mut log, row(oracle, &clone, eval, last_loss, eta)?)?;
    Ok(BaselineOutcome {
        clone,
        log,
        queries: oracle.ledger().used - start.used,
        pool_sizes: vec![],
    })
}

fn replay<R: Rng + ?Sized>(
    clone: &mut Model,
    opt: &mut Sgd,
    buffer: &ReplayBuffer,
    steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<()> {
    if buffer.is_empty() {
        return Ok(());
    }
    let b = batch.min(buffer.len());
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    for _ in 0..steps {
        if pos + b > order.len() {
            order = (0..buffer.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], rng);
            pos = 0;
        }
        let (x, y) = buffer.batch(&order[pos..pos + b]);
        pos += b;
        let (_, grads) = distill_grads(clone, &x, &y)?;
        opt.step(clone, &grads)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clone_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.03,
            momentum: 0.9,
            batch_size: 64,
            clone_hidden: vec![64, 64],
            seed: 0,
        }
    }
}

/// Labels every surrogate input once, then trains the clone offline with
/// cosine-annealed SGD.
pub fn run_surrogate<O: SoftLabelOracle + ?Sized>(
    oracle: &O,
    surrogate: &Tensor,
    cfg: &SurrogateConfig,
    eval: &EvalSet,
) -> Result<BaselineOutcome> {
    if surrogate.rows() == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "surrogate attack needs data and batch_size >= 1".into(),
        ));
    }
    let start = oracle.ledger();
    if (surrogate.rows() as u64) > start.remaining() {
        return Err(Error::BudgetExhausted {
            used: start.used,
            budget: start.budget,
            requested: surrogate.rows() as u64,
        });
    }
    let mut clone = new_clone(oracle, &cfg.clone_hidden, cfg.seed)?;
    let mut log = AttackLog::default();
    log.rows.push(row(oracle, &clone, eval, f64::NAN, cfg.lr)?);
    let labels = oracle.query(surrogate)?;

    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let per_epoch = surrogate.rows().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut last = f64::NAN;
    if total > 0 {
        let schedule = CosineSchedule::new(cfg.lr, total)?;
        let mut t = 0;
        for _ in 0..cfg.epochs {
            let mut sum = 0.0;
            for idx in epoch_batches(surrogate.rows(), cfg.batch_size, &mut rng) {
                opt.set_lr(schedule.lr(t)?);
                let (loss, grads) = distill_grads(
                    &mut clone,
                    &surrogate.select_rows(&idx),
                    &labels.select_rows(&idx),
                )?;
                opt.step(&mut clone, &grads)?;
                sum += loss;
                t += 1;
            }
            last = sum / per_epoch as f64;
        }
    }
    log.push(row(oracle, &clone, eval, last, 0.0)?)?;
    Ok(BaselineOutcome {
        clone,
        log,
        queries: oracle.ledger().used - start.used,
        pool_sizes: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::oracle::BlackBoxOracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Softmax over `x W` with a fixed weight, so input gradients are known.
    fn linear_softmax(w: Vec<f64>, d: usize, k: usize) -> Model {
        Model::from_layers(
            d,
            vec![
                Layer::Linear {
                    weight: Tensor::matrix(d, k, w).unwrap(),
                    bias: Tensor::zeros(&[1, k]),
                },
                Layer::Softmax,
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let m = linear_softmax(vec![0.0; 6], 3, 2);
        let x = Tensor::matrix(1, 3, vec![0.2, -0.4, 0.9]).unwrap();
        assert_eq!(jbda_augment(&m, &x, &[0], 0.1).unwrap(), x);
    }

    #[test]
    fn positive_gradient_steps_and_clips() {
        // Label 1 on a model favouring class 0 through every input: the
        // loss grows with each coordinate, so the gradient is positive.
        let m = linear_softmax(vec![1.0, -1.0, 1.0, -1.0], 2, 2);
        let x = Tensor::zeros(&[1, 2]);
        let out = jbda_augment(&m, &x, &[1], 0.1).unwrap();
        assert_eq!(out.data(), &[0.1, 0.1]);
        let x = Tensor::full(&[1, 2], 0.95);
        let out = jbda_augment(&m, &x, &[1], 0.1).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::mlp(
            3,
            &[4],
            3,
            LayerSpec::Tanh,
            Some(LayerSpec::Softmax),
            &mut rng,
        )
        .unwrap();
        let x = Tensor::uniform(2, 3, -1.0, 1.0, &mut rng);
        let labels = [2, 0];
        let g = cross_entropy_input_grad(&m, &x, &labels).unwrap();
        let ce = |x: &Tensor| -> f64 {
            let p = m.forward(x).unwrap();
            labels
                .iter()
                .enumerate()
                .map(|(r, &y)| -p.row(r)[y].ln())
                .sum()
        };
        for i in 0..x.numel() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[i] += 1e-6;
            b.data_mut()[i] -= 1e-6;
            let fd = (ce(&a) - ce(&b)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_spends_exact_budget() {
        let target = Model::mlp(
            4,
            &[6],
            3,
            LayerSpec::Relu,
            Some(LayerSpec::Softmax),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let eval = EvalSet::new(Tensor::zeros(&[3, 4]), vec![0, 1, 2], 1.0).unwrap();
        let cfg = AttackConfig {
            budget: 1000,
            batch_size: 64,
            clone_hidden: vec![8],
            ..AttackConfig::default()
        };
        let oracle = BlackBoxOracle::with_budget(target, 5000).unwrap();
        let out = run_noise(&oracle, &cfg, &eval).unwrap();
        assert_eq!(out.queries, 1000);
        assert_eq!(oracle.ledger().used, 1000);
    }
}
