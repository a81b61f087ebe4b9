//! Parameter sweeps and the run report.
//!
//! A sweep varies one axis of a base configuration over a list of values and
//! repeats each value with seeds `base, base + 1, ...`. Runs are independent
//! and execute in parallel; a failed run becomes a row with status `failed`
//! and the sweep carries on.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AttackKind, RunConfig};
use crate::error::{Error, Result};
use crate::experiment::{execute, Task};
use crate::metrics::{median, median_abs_deviation};
use crate::par;

/// Bumped whenever the report columns change.
pub const REPORT_VERSION: u32 = 1;

pub const REPORT_COLUMNS: [&str; 12] = [
    "report_version",
    "attack",
    "config_hash",
    "seed",
    "axis",
    "value",
    "final_q",
    "clone_acc",
    "norm_acc",
    "target_acc",
    "wall_time",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Query budget.
    Q,
    /// Directions per sample.
    M,
    /// Experience replay on or off.
    Replay,
    /// Attack kind.
    Attack,
}

impl Axis {
    pub fn id(self) -> &'static str {
        match self {
            Axis::Q => "q",
            Axis::M => "m",
            Axis::Replay => "replay",
            Axis::Attack => "attack",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" | "budget" => Ok(Axis::Q),
            "m" | "directions" => Ok(Axis::M),
            "replay" => Ok(Axis::Replay),
            "attack" => Ok(Axis::Attack),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}`, expected Q, m, replay or attack"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<String>,
    pub repeats: usize,
    /// Attack used on every axis except [`Axis::Attack`].
    pub attack: AttackKind,
    pub base: RunConfig,
}

/// One (value, seed) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub kind: AttackKind,
    pub value: String,
    pub config: RunConfig,
}

fn parse_count(axis: Axis, v: &str) -> Result<u64> {
    let bad = || {
        Error::Config(format!(
            "sweep value `{v}` is not a non-negative integer for axis {}",
            axis.id()
        ))
    };
    if let Ok(n) = v.parse::<u64>() {
        return Ok(n);
    }
    // Accept 2.5e4 style budgets as long as they are whole numbers.
    let f: f64 = v.parse().map_err(|_| bad())?;
    if f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 {
        Ok(f as u64)
    } else {
        Err(bad())
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("sweep repeats must be at least 1".into()));
        }
        self.base.validate()
    }

    /// Every run in value-major, seed-minor order.
    pub fn plan(&self) -> Result<Vec<RunPlan>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.values.len() * self.repeats);
        for value in &self.values {
            let value = value.trim();
            let mut cfg = self.base.clone();
            let mut kind = self.attack;
            match self.axis {
                Axis::Q => cfg.attack.budget = parse_count(self.axis, value)?,
                Axis::M => cfg.attack.directions = parse_count(self.axis, value)? as usize,
                Axis::Replay => match value.to_ascii_lowercase().as_str() {
                    "on" | "true" | "1" => {
                        if cfg.attack.replay_steps == 0 {
                            return Err(Error::Config(
                                "replay=on needs attack.replay_steps > 0".into(),
                            ));
                        }
                    }
                    "off" | "false" | "0" => cfg.attack.replay_steps = 0,
                    _ => {
                        return Err(Error::Config(format!(
                            "replay value `{value}` must be on or off"
                        )))
                    }
                },
                Axis::Attack => kind = value.parse()?,
            }
            cfg.validate()?;
            for i in 0..self.repeats {
                out.push(RunPlan {
                    kind,
                    value: value.to_string(),
                    config: cfg.with_seed(self.base.seed() + i as u64),
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub report_version: u32,
    pub attack: AttackKind,
    pub config_hash: String,
    pub seed: u64,
    pub axis: String,
    pub value: String,
    pub final_q: u64,
    pub clone_acc: f64,
    pub norm_acc: f64,
    pub target_acc: f64,
    pub wall_time: f64,
    /// `ok`, or `failed: <message>`.
    pub status: String,
}

impl ReportRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Median and spread of one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub attack: AttackKind,
    pub axis: String,
    pub value: String,
    pub runs: usize,
    pub failed: usize,
    pub median_norm_acc: f64,
    pub mad_norm_acc: f64,
    pub median_final_q: f64,
}

impl Report {
    /// Sorts by config hash, then seed, so the order does not depend on
    /// which run finished first.
    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| (&a.config_hash, a.seed).cmp(&(&b.config_hash, b.seed)));
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(REPORT_COLUMNS)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != REPORT_COLUMNS {
            return Err(Error::Invalid(format!(
                "report header {header:?} does not match {REPORT_COLUMNS:?}"
            )));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        if let Some(row) = rows.iter().find(|row| row.report_version != REPORT_VERSION) {
            return Err(Error::Invalid(format!(
                "report version {} is not supported (expected {REPORT_VERSION})",
                row.report_version
            )));
        }
        Ok(Self { rows })
    }

    /// One row per (attack, axis, value), numeric values in ascending
    /// order. Failed runs are counted but excluded from the medians.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(AttackKind, String, String), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.attack, r.axis.clone(), r.value.clone()))
                .or_default()
                .push(r);
        }
        let mut order: Vec<(AttackKind, String, String)> = groups.keys().cloned().collect();
        order.sort_by(|a, b| {
            let num = |v: &str| v.parse::<f64>().unwrap_or(f64::INFINITY);
            (a.0, &a.1)
                .cmp(&(b.0, &b.1))
                .then(num(&a.2).total_cmp(&num(&b.2)))
                .then(a.2.cmp(&b.2))
        });
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let ok: Vec<&&ReportRow> = rows.iter().filter(|r| r.ok()).collect();
                let norm: Vec<f64> = ok.iter().map(|r| r.norm_acc).collect();
                let q: Vec<f64> = ok.iter().map(|r| r.final_q as f64).collect();
                SummaryRow {
                    attack: key.0,
                    axis: key.1,
                    value: key.2,
                    runs: rows.len(),
                    failed: rows.len() - ok.len(),
                    median_norm_acc: median_or_nan(&norm, median),
                    mad_norm_acc: median_or_nan(&norm, median_abs_deviation),
                    median_final_q: median_or_nan(&q, median),
                }
            })
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:<7} {:>10} {:>5} {:>6} {:>10} {:>8} {:>10}\n",
            "attack", "axis", "value", "runs", "failed", "norm_acc", "mad", "final_q"
        );
        for r in self.summary() {
            s.push_str(&format!(
                "{:<14} {:<7} {:>10} {:>5} {:>6} {:>10.4} {:>8.4} {:>10.0}\n",
                r.attack.id(),
                r.axis,
                r.value,
                r.runs,
                r.failed,
                r.median_norm_acc,
                r.mad_norm_acc,
                r.median_final_q
            ));
        }
        s
    }
}

fn median_or_nan(v: &[f64], f: fn(&[f64]) -> f64) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        f(v)
    }
}

/// Runs one plan; errors become a failure row.
pub fn run_one(plan: &RunPlan, axis: Axis, task: &Task) -> ReportRow {
    let hash = plan
        .config
        .config_hash(plan.kind)
        .unwrap_or_else(|e| format!("unhashable: {e}"));
    let mut row = ReportRow {
        report_version: REPORT_VERSION,
        attack: plan.kind,
        config_hash: hash,
        seed: plan.config.seed(),
        axis: axis.id().to_string(),
        value: plan.value.clone(),
        final_q: 0,
        clone_acc: f64::NAN,
        norm_acc: f64::NAN,
        target_acc: task.target.test_accuracy,
        wall_time: 0.0,
        status: "ok".into(),
    };
    match execute(plan.kind, &plan.config, task) {
        Ok(out) => {
            row.final_q = out.queries;
            row.clone_acc = out.final_clone_accuracy();
            row.norm_acc = out.final_normalized_accuracy();
            row.wall_time = out.wall_time;
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
    row
}

/// Runs every plan against one prepared task (the target is trained once).
pub fn run_sweep(spec: &SweepSpec, task: &Task) -> Result<Report> {
    let plans = spec.plan()?;
    let rows = par::map_indices(plans.len(), |i| run_one(&plans[i], spec.axis, task));
    let mut report = Report { rows };
    report.sort();
    Ok(report)
}
