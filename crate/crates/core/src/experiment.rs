//! One attack run against a freshly trained target.

use std::time::Instant;

use crate::attack::{run_maze, run_maze_whitebox, AttackLog, EvalSet};
use crate::baselines::{run_jbda, run_noise, run_surrogate};
use crate::config::{AttackKind, RunConfig};
use crate::data::{make_dataset, Dataset};
use crate::error::Result;
use crate::generator::Generator;
use crate::nn::Model;
use crate::oracle::{train_target, BlackBoxOracle, SoftLabelOracle, TrainedTarget};
use crate::pd::{run_maze_pd, SeedSet};

/// Dataset, target and held-out evaluation set for a run.
#[derive(Debug, Clone)]
pub struct Task {
    pub data: Dataset,
    pub target: TrainedTarget,
    pub eval: EvalSet,
}

impl Task {
    /// Builds the dataset and trains the target, both seeded by the
    /// dataset seed.
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let data = make_dataset(&cfg.dataset)?;
        let target = train_target(&cfg.target, &data, cfg.dataset.seed)?;
        Self::from_parts(data, target)
    }

    pub fn from_parts(data: Dataset, target: TrainedTarget) -> Result<Self> {
        let eval = EvalSet::new(
            data.test_x.clone(),
            data.test_y.clone(),
            target.test_accuracy,
        )?;
        Ok(Self { data, target, eval })
    }

    /// A fresh oracle around the target with its own ledger.
    pub fn oracle(&self, budget: u64) -> Result<BlackBoxOracle> {
        BlackBoxOracle::with_budget(self.target.model.clone(), budget)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub kind: AttackKind,
    pub clone: Model,
    /// Data-free variants only.
    pub generator: Option<Generator>,
    pub critic: Option<Model>,
    /// Outer iterations completed, for the data-free variants.
    pub iterations: Option<u64>,
    pub log: AttackLog,
    pub queries: u64,
    pub wall_time: f64,
}

impl RunOutcome {
    pub fn final_clone_accuracy(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.clone_acc)
    }

    pub fn final_normalized_accuracy(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.norm_acc)
    }
}

/// Runs `kind` with the run seed `cfg.attack.seed` on a new oracle whose
/// budget is `cfg.attack.budget`.
pub fn execute(kind: AttackKind, cfg: &RunConfig, task: &Task) -> Result<RunOutcome> {
    let oracle = task.oracle(cfg.attack.budget)?;
    execute_on(kind, cfg, task, &oracle)
}

/// As [`execute`], against a caller-supplied oracle.
pub fn execute_on<O: SoftLabelOracle>(
    kind: AttackKind,
    cfg: &RunConfig,
    task: &Task,
    oracle: &O,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let seed = cfg.seed();
    let before = oracle.ledger().used;
    let (clone, generator, critic, iterations, log) = match kind {
        AttackKind::Maze => {
            let r = run_maze(oracle, &cfg.attack, &task.eval)?;
            (r.clone, Some(r.generator), None, Some(r.iterations), r.log)
        }
        AttackKind::MazeWhitebox => {
            let r = run_maze_whitebox(oracle, &task.target.model, &cfg.attack, &task.eval)?;
            (r.clone, Some(r.generator), None, Some(r.iterations), r.log)
        }
        AttackKind::MazePd => {
            let seeds = SeedSet::from_dataset(&task.data, cfg.pd.seed_examples, seed)?;
            let r = run_maze_pd(oracle, &seeds, &cfg.attack, &cfg.pd, &task.eval)?;
            (
                r.attack.clone,
                Some(r.attack.generator),
                Some(r.critic),
                Some(r.attack.iterations),
                r.attack.log,
            )
        }
        AttackKind::Jbda => {
            let seeds = SeedSet::from_dataset(&task.data, cfg.jbda.n_seeds, seed)?;
            let r = run_jbda(oracle, &seeds, &cfg.jbda, &task.eval)?;
            (r.clone, None, None, None, r.log)
        }
        AttackKind::Noise => {
            let r = run_noise(oracle, &cfg.attack, &task.eval)?;
            (r.clone, None, None, None, r.log)
        }
        AttackKind::Surrogate => {
            let surrogate = make_dataset(&cfg.surrogate_data)?;
            let r = run_surrogate(oracle, &surrogate.train_x, &cfg.surrogate, &task.eval)?;
            (r.clone, None, None, None, r.log)
        }
    };
    Ok(RunOutcome {
        kind,
        clone,
        generator,
        critic,
        iterations,
        log,
        queries: oracle.ledger().used - before,
        wall_time: started.elapsed().as_secs_f64(),
    })
}
