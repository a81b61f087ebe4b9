use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use maze_core::attack::AttackLog;
use maze_core::checkpoint;
use maze_core::config::{AttackKind, RunConfig};
use maze_core::data::make_dataset;
use maze_core::experiment::{execute, Task};
use maze_core::metrics::{agreement_rate, normalized_accuracy};
use maze_core::oracle::{TargetManifest, TrainedTarget};
use maze_core::par;
use maze_core::sweep::{run_sweep, Axis, Report, SweepSpec};
use maze_core::train::accuracy;

#[derive(Parser)]
#[command(
    name = "maze",
    version,
    about = "Data-free model extraction experiments"
)]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs on any machine).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a target classifier and write it to a directory.
    TrainTarget {
        #[command(flatten)]
        common: Common,
    },
    /// Run one attack against the target.
    Attack {
        /// maze, maze-pd, maze-whitebox, jbda, noise or surrogate.
        kind: AttackKind,
        #[command(flatten)]
        common: Common,
        /// Reuse a target written by `train-target` instead of training one.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Vary one parameter over several values and seeds.
    Sweep {
        /// Q, m, replay or attack.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Runs per value, with seeds counting up from the run seed.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Attack for every axis except `attack`.
        #[arg(long, default_value = "maze")]
        attack: AttackKind,
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate a finished attack run without querying the target.
    Eval {
        /// Run directory written by `attack`.
        run: PathBuf,
    },
    /// Merge report CSVs and print per-value medians.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write the merged, sorted report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Query budget Q.
    #[arg(long)]
    budget: Option<u64>,
    /// Batch size B.
    #[arg(long = "B")]
    batch: Option<usize>,
    /// Random directions per sample.
    #[arg(long = "m")]
    directions: Option<usize>,
    /// Generator steps per iteration.
    #[arg(long = "NG")]
    gen_steps: Option<usize>,
    /// Clone steps per iteration.
    #[arg(long = "NC")]
    clone_steps: Option<usize>,
    /// Replay steps per iteration.
    #[arg(long = "NR")]
    replay_steps: Option<usize>,
    /// Finite-difference step.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Peak generator learning rate
    #[arg(long)]
    lr_generator: Option<f64>,
    /// Peak clone learning rate
    #[arg(long)]
    lr_clone: Option<f64>,
    /// Weight of the critic term (maze-pd).
    #[arg(long)]
    lambda: Option<f64>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Log every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let a = &mut cfg.attack;
        if let Some(v) = self.budget {
            a.budget = v;
        }
        if let Some(v) = self.batch {
            a.batch_size = v;
        }
        if let Some(v) = self.directions {
            a.directions = v;
        }
        if let Some(v) = self.gen_steps {
            a.gen_steps = v;
        }
        if let Some(v) = self.clone_steps {
            a.clone_steps = v;
        }
        if let Some(v) = self.replay_steps {
            a.replay_steps = v;
        }
        if let Some(v) = self.epsilon {
            a.epsilon = v;
        }
        if let Some(v) = self.lr_generator {
            a.lr_generator = v;
        }
        if let Some(v) = self.lr_clone {
            a.lr_clone = v;
        }
        if let Some(v) = self.checkpoint_every {
            a.checkpoint_every = v;
        }
        if let Some(v) = self.lambda {
            cfg.pd.lambda = v;
        }
        let seed = self.seed.unwrap_or(cfg.seed());
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default: String) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(default));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

/// Summary written next to every attack run.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    attack: AttackKind,
    config_hash: String,
    seed: u64,
    budget: u64,
    queries: u64,
    /// Absent for attacks without outer iterations.
    iterations: Option<u64>,
    clone_acc: f64,
    norm_acc: f64,
    target_acc: f64,
    wall_time: f64,
}

const TARGET_CKPT: &str = "target.ckpt";
const TARGET_MANIFEST: &str = "target.toml";

fn write_target(dir: &Path, task: &Task) -> Result<()> {
    checkpoint::save(
        dir.join(TARGET_CKPT),
        &task.target.model,
        task.data.spec.seed,
    )?;
    TargetManifest {
        dataset: task.data.id(),
        seed: task.data.spec.seed,
        test_accuracy: task.target.test_accuracy,
        checkpoint: TARGET_CKPT.into(),
        classes: task.data.classes(),
        input_dim: task.data.dim(),
    }
    .save(dir.join(TARGET_MANIFEST))?;
    Ok(())
}

fn load_task(cfg: &RunConfig, target_dir: &Path) -> Result<Task> {
    let manifest = TargetManifest::load(target_dir.join(TARGET_MANIFEST))
        .with_context(|| format!("reading target manifest in {}", target_dir.display()))?;
    let data = make_dataset(&cfg.dataset)?;
    if manifest.dataset != data.id()
        || manifest.input_dim != data.dim()
        || manifest.classes != data.classes()
    {
        bail!(
            "target in {} was trained on {} but the config describes {}",
            target_dir.display(),
            manifest.dataset,
            data.id()
        );
    }
    let ckpt = checkpoint::load(target_dir.join(&manifest.checkpoint))?;
    let target = TrainedTarget {
        model: ckpt.model,
        test_accuracy: manifest.test_accuracy,
    };
    Ok(Task::from_parts(data, target)?)
}

fn train_target_cmd(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let task = Task::prepare(&cfg)?;
    let dir = common.out_dir(format!("target-{}", task.data.id()))?;
    cfg.save(dir.join("config.toml"))?;
    write_target(&dir, &task)?;
    println!("target test accuracy {:.4}", task.target.test_accuracy);
    println!("wrote {}", dir.display());
    Ok(())
}

fn attack_cmd(kind: AttackKind, common: &Common, target: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let hash = cfg.config_hash(kind)?;
    let task = match target {
        Some(dir) => load_task(&cfg, dir)?,
        None => Task::prepare(&cfg)?,
    };
    let dir = common.out_dir(format!("{kind}-{hash}-s{}", cfg.seed()))?;
    cfg.save(dir.join("config.toml"))?;
    write_target(&dir, &task)?;

    let out = execute(kind, &cfg, &task)?;
    out.log.save(dir.join("log.csv"))?;
    checkpoint::save(dir.join("clone.ckpt"), &out.clone, cfg.seed())?;
    if let Some(g) = &out.generator {
        checkpoint::save(dir.join("generator.ckpt"), g.model(), cfg.seed())?;
    }
    if let Some(c) = &out.critic {
        checkpoint::save(dir.join("critic.ckpt"), c, cfg.seed())?;
    }
    let manifest = RunManifest {
        attack: kind,
        config_hash: hash,
        seed: cfg.seed(),
        budget: cfg.attack.budget,
        queries: out.queries,
        iterations: out.iterations,
        clone_acc: out.final_clone_accuracy(),
        norm_acc: out.final_normalized_accuracy(),
        target_acc: task.target.test_accuracy,
        wall_time: out.wall_time,
    };
    std::fs::write(dir.join("manifest.toml"), toml::to_string(&manifest)?)?;

    let iterations = out
        .iterations
        .map(|n| format!(", {n} iterations"))
        .unwrap_or_default();
    println!(
        "{kind}: {} queries{iterations}, clone acc {:.4} ({:.4}x target)",
        out.queries, manifest.clone_acc, manifest.norm_acc
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep_cmd(
    axis: Axis,
    values: Vec<String>,
    repeats: usize,
    attack: AttackKind,
    common: &Common,
) -> Result<()> {
    let base = common.config()?;
    let spec = SweepSpec {
        axis,
        values,
        repeats,
        attack,
        base,
    };
    spec.validate()?;
    let dir = common.out_dir(format!(
        "sweep-{}-{}",
        axis.id(),
        spec.base.config_hash(attack)?
    ))?;
    spec.base.save(dir.join("config.toml"))?;
    let task = Task::prepare(&spec.base)?;
    let report = run_sweep(&spec, &task)?;
    report.write_csv(dir.join("report.csv"))?;
    let table = report.summary_table();
    std::fs::write(dir.join("summary.txt"), &table)?;
    print!("{table}");
    let failed = report.rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} runs failed, see report.csv",
            report.rows.len()
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval_cmd(run: &Path) -> Result<()> {
    let cfg = RunConfig::load(run.join("config.toml"))?;
    let task = load_task(&cfg, run)?;
    let clone = checkpoint::load(run.join("clone.ckpt"))
        .with_context(|| format!("reading clone checkpoint in {}", run.display()))?
        .model;
    let acc = accuracy(&clone, &task.eval.x, &task.eval.y)?;
    let norm = normalized_accuracy(acc, task.target.test_accuracy)?;
    let agree = agreement_rate(&clone, &task.target.model, &task.eval.x)?;
    println!("clone_acc = {acc:.6}");
    println!("target_acc = {:.6}", task.target.test_accuracy);
    println!("norm_acc = {norm:.6}");
    println!("agreement = {agree:.6}");
    if let Ok(log) = AttackLog::load(run.join("log.csv")) {
        if let Some(last) = log.last() {
            println!("final_q = {}", last.q);
        }
    }
    Ok(())
}

fn report_cmd(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut merged = Report::default();
    for p in inputs {
        let r = Report::read_csv(p).with_context(|| format!("reading {}", p.display()))?;
        merged.rows.extend(r.rows);
    }
    merged.sort();
    if let Some(path) = out {
        merged.write_csv(path)?;
    }
    print!("{}", merged.summary_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTarget { common } => train_target_cmd(&common),
        Command::Attack {
            kind,
            common,
            target,
        } => attack_cmd(kind, &common, target.as_deref()),
        Command::Sweep {
            axis,
            values,
            repeats,
            attack,
            common,
        } => sweep_cmd(axis, values, repeats, attack, &common),
        Command::Eval { run } => eval_cmd(&run),
        Command::Report { inputs, out } => report_cmd(&inputs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(n) => par::with_threads(n, move || run(cli))
            .map_err(anyhow::Error::from)
            .and_then(|r| r),
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
