//! One-axis sensitivity sweeps: a grid of independent training runs with a
//! combined summary table. Runs may execute concurrently; each owns its
//! output directory.

use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::channel::db_to_linear;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::trainer::{train, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Mean SNR in dB; sets the transmit power against the configured noise.
    Snr,
    Lambda,
    Schedule,
    Prediction,
    /// DDIM inference steps.
    Tdiff,
    Rmax,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Axis::Snr, Axis::Lambda, Axis::Schedule, Axis::Prediction, Axis::Tdiff, Axis::Rmax];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Snr => "snr",
            Axis::Lambda => "lambda",
            Axis::Schedule => "schedule",
            Axis::Prediction => "prediction",
            Axis::Tdiff => "tdiff",
            Axis::Rmax => "rmax",
        }
    }

    /// Writes `value` into `config` and validates the result.
    pub fn apply(self, config: &mut RunConfig, value: &str) -> Result<()> {
        match self {
            Axis::Snr => {
                let db: f64 = value
                    .parse()
                    .map_err(|_| Error::config("snr", format!("`{value}` is not a number")))?;
                config.channel.transmit_power = config.channel.noise_power * db_to_linear(db);
            }
            Axis::Lambda => config.set("env.lambda", value)?,
            Axis::Schedule => config.set("diffusion.schedule", value)?,
            Axis::Prediction => config.set("diffusion.prediction", value)?,
            Axis::Tdiff => config.set("diffusion.inference_steps", value)?,
            Axis::Rmax => config.set("env.r_max", value)?,
        }
        config.validate()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sweep axis `{s}` (expected snr, lambda, schedule, prediction, tdiff or rmax)")))
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub index: usize,
    pub value: String,
    pub config: RunConfig,
    pub dir: PathBuf,
}

/// Resolves every grid point up front; an empty list or any out-of-range
/// value rejects the whole sweep before anything runs. Point `i` trains
/// with seed `base + i` unless `shared_seed` is set.
pub fn plan(base: &RunConfig, axis: Axis, values: &[String], root: &Path, shared_seed: bool) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut config = base.clone();
            axis.apply(&mut config, v)?;
            if !shared_seed {
                config.trainer.seed = base.trainer.seed.wrapping_add(i as u64);
            }
            let tag: String = v
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            let dir = root.join(format!("{axis}_{i:02}_{tag}"));
            config.output_dir = Some(dir.clone());
            Ok(SweepPoint { index: i, value: v.clone(), config, dir })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub status: String,
    pub steps_run: u64,
    pub stopped_early: bool,
    pub final_reward: Option<f64>,
    pub final_task_loss: Option<f64>,
    pub final_comm_cost: Option<f64>,
    pub final_mean_rank: Option<f64>,
    pub reward_auc: Option<f64>,
    pub budget_violations: Option<usize>,
    pub dir: String,
    pub error: String,
}

fn run_point(axis: Axis, p: SweepPoint) -> SweepRow {
    let mut row = SweepRow {
        axis: axis.name().into(),
        value: p.value.clone(),
        seed: p.config.trainer.seed,
        status: "failed".into(),
        steps_run: 0,
        stopped_early: false,
        final_reward: None,
        final_task_loss: None,
        final_comm_cost: None,
        final_mean_rank: None,
        reward_auc: None,
        budget_violations: None,
        dir: p.dir.display().to_string(),
        error: String::new(),
    };
    let opts = TrainOptions { output_dir: Some(p.dir.clone()), resume: false };
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| train(&p.config, &opts)));
    match outcome {
        Ok(Ok((m, _))) => {
            row.status = "ok".into();
            row.steps_run = m.steps_run;
            row.stopped_early = m.stopped_early;
            if let Some(e) = m.final_eval() {
                row.final_reward = Some(e.mean_reward);
                row.final_task_loss = Some(e.mean_task_loss);
                row.final_comm_cost = Some(e.mean_comm_cost);
                row.final_mean_rank = Some(e.mean_rank);
            }
            row.reward_auc = Some(m.reward_auc());
            row.budget_violations = Some(m.budget_violations());
        }
        Ok(Err(e)) => row.error = e.to_string(),
        Err(_) => row.error = "run panicked".into(),
    }
    row
}

/// Runs every point on up to `workers` threads (0 = all cores). Failed runs
/// keep their row with `status = failed`.
pub fn run(axis: Axis, points: Vec<SweepPoint>, workers: usize) -> Vec<SweepRow> {
    par::with_workers(workers, || par::map(points, |p| run_point(axis, p)))
}

pub fn write_summary(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
