//! The black-box target.
//!
//! Attack code sees the target only through [`SoftLabelOracle`]: a batch of
//! inputs in, a batch of probability rows out, with every row charged to a
//! [`QueryLedger`]. The wrapped model is private to this module.
//!
//! The target's parameters cannot be reached through the oracle:
//!
//! ```compile_fail
//! # use maze_core::oracle::BlackBoxOracle;
//! fn steal(o: &BlackBoxOracle) {
//!     let _ = &o.target;
//! }
//! ```

use std::collections::HashSet;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{check_probability_rows, one_hot};
use crate::nn::{LayerSpec, Mode, Model};
use crate::optim::Adam;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::train::{accuracy, distill_grads, epoch_batches};

/// Target queries consumed by one outer attack iteration:
/// `batch * (gen_steps * (directions + 1) + clone_steps)`.
pub fn query_cost_per_iteration(
    batch: u64,
    gen_steps: u64,
    directions: u64,
    clone_steps: u64,
) -> u64 {
    batch * (gen_steps * (directions + 1) + clone_steps)
}

/// Whether repeated identical input rows are charged again.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupPolicy {
    #[default]
    CountAll,
    /// Rows bit-identical to an earlier query are free.
    FreeRepeats,
}

#[derive(Debug, Default)]
struct LedgerState {
    used: u64,
    seen: HashSet<Vec<u64>>,
}

/// Row-granular query counter with an optional hard budget.
#[derive(Debug)]
pub struct QueryLedger {
    budget: u64,
    enforce: bool,
    dedup: DedupPolicy,
    state: Mutex<LedgerState>,
}

/// Point-in-time view of a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub used: u64,
    pub budget: u64,
}

impl LedgerSnapshot {
    pub fn remaining(&self) -> u64 {
        self.budget.saturating_sub(self.used)
    }
}

impl QueryLedger {
    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            enforce: true,
            dedup: DedupPolicy::CountAll,
            state: Mutex::new(LedgerState::default()),
        }
    }

    /// Counts queries without ever rejecting them.
    pub fn unbounded() -> Self {
        Self {
            enforce: false,
            ..Self::new(u64::MAX)
        }
    }

    pub fn with_dedup(mut self, dedup: DedupPolicy) -> Self {
        self.dedup = dedup;
        self
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            used: self.state.lock().expect("ledger lock").used,
            budget: self.budget,
        }
    }

    /// Atomically checks the budget and charges the rows of `batch`.
    /// A batch that would overflow the budget is rejected whole.
    pub fn charge(&self, batch: &Tensor) -> Result<u64> {
        let mut st = self.state.lock().expect("ledger lock");
        let keys: Option<Vec<Vec<u64>>> = match self.dedup {
            DedupPolicy::CountAll => None,
            DedupPolicy::FreeRepeats => Some(
                (0..batch.rows())
                    .map(|r| batch.row(r).iter().map(|v| v.to_bits()).collect())
                    .collect(),
            ),
        };
        let cost = match &keys {
            None => batch.rows() as u64,
            Some(keys) => {
                let mut fresh = HashSet::new();
                keys.iter()
                    .filter(|k| !st.seen.contains(*k) && fresh.insert(*k))
                    .count() as u64
            }
        };
        if self.enforce && st.used + cost > self.budget {
            return Err(Error::BudgetExhausted {
                used: st.used,
                budget: self.budget,
                requested: cost,
            });
        }
        st.used += cost;
        if let Some(keys) = keys {
            st.seen.extend(keys);
        }
        Ok(cost)
    }
}

/// Query-only access to a soft-label classifier.
pub trait SoftLabelOracle: Sync {
    /// Returns one probability row per input row and charges the ledger.
    fn query(&self, batch: &Tensor) -> Result<Tensor>;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn ledger(&self) -> LedgerSnapshot;
}

/// In-process oracle around a trained softmax classifier.
///
/// The ledger is private too, so it cannot be swapped out:
///
/// ```compile_fail
/// use maze_core::oracle::BlackBoxOracle;
/// fn reset(o: &mut BlackBoxOracle) {
///     o.ledger = maze_core::oracle::QueryLedger::unbounded();
/// }
/// ```
#[derive(Debug)]
pub struct BlackBoxOracle {
    target: Model,
    ledger: QueryLedger,
}

impl BlackBoxOracle {
    pub fn new(target: Model, ledger: QueryLedger) -> Result<Self> {
        if !target.ends_with(LayerSpec::Softmax) {
            return Err(Error::Invalid(
                "oracle target must end in a softmax layer".into(),
            ));
        }
        let mut target = target;
        target.set_mode(Mode::Eval);
        Ok(Self { target, ledger })
    }

    pub fn with_budget(target: Model, budget: u64) -> Result<Self> {
        Self::new(target, QueryLedger::new(budget))
    }
}

impl SoftLabelOracle for BlackBoxOracle {
    fn query(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != 2 || batch.cols() != self.target.input_dim() {
            return Err(Error::Shape {
                context: "oracle query".into(),
                expected: vec![batch.rows(), self.target.input_dim()],
                got: batch.shape().to_vec(),
            });
        }
        for r in 0..batch.rows() {
            for (c, &v) in batch.row(r).iter().enumerate() {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::OutOfRange {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
        }
        self.ledger.charge(batch)?;
        let out = self.target.forward(batch)?;
        debug_assert!(check_probability_rows(&out).is_ok());
        Ok(out)
    }

    fn input_dim(&self) -> usize {
        self.target.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.target.output_dim()
    }

    fn ledger(&self) -> LedgerSnapshot {
        self.ledger.snapshot()
    }
}

/// How to build and train a target classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Training aborts with an error if test accuracy ends below this.
    pub accuracy_floor: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 50,
            lr: 1e-3,
            batch_size: 64,
            accuracy_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTarget {
    pub model: Model,
    pub test_accuracy: f64,
}

/// Trains a ReLU MLP target with Adam on hard labels.
pub fn train_target(spec: &TargetSpec, data: &Dataset, seed: u64) -> Result<TrainedTarget> {
    let mut init = stream(seed, Stream::Target);
    let mut model = Model::mlp(
        data.dim(),
        &spec.hidden,
        data.classes(),
        LayerSpec::Relu,
        Some(LayerSpec::Softmax),
        &mut init,
    )?;
    let mut shuffle = stream(seed, Stream::Shuffle);
    let targets = one_hot(&data.train_y, data.classes())?;
    let mut opt = Adam::with_lr(spec.lr);
    for _ in 0..spec.epochs {
        for idx in epoch_batches(data.train_y.len(), spec.batch_size, &mut shuffle) {
            let x = data.train_x.select_rows(&idx);
            let y = targets.select_rows(&idx);
            let (_, grads) = distill_grads(&mut model, &x, &y)?;
            opt.step(&mut model, &grads)?;
        }
    }
    model.set_mode(Mode::Eval);
    let test_accuracy = accuracy(&model, &data.test_x, &data.test_y)?;
    if test_accuracy < spec.accuracy_floor {
        return Err(Error::TargetNotConverged {
            accuracy: test_accuracy,
            floor: spec.accuracy_floor,
        });
    }
    Ok(TrainedTarget {
        model,
        test_accuracy,
    })
}

/// Sidecar metadata written next to a target checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetManifest {
    pub dataset: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub checkpoint: String,
    pub classes: usize,
    pub input_dim: usize,
}

impl TargetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Uniform inputs in `[-1, 1]^d`.
pub fn uniform_inputs<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(rows, dim, -1.0, 1.0, rng)
}
