use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    ScaledLinear,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [
        ScheduleKind::Linear,
        ScheduleKind::Cosine,
        ScheduleKind::ScaledLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::ScaledLinear => "scaled_linear",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "scaled_linear" | "scaled-linear" => Ok(ScheduleKind::ScaledLinear),
            other => Err(Error::invalid(format!(
                "unknown schedule kind `{other}` (expected linear, cosine or scaled_linear)"
            ))),
        }
    }
}

/// Variance schedule over training steps `τ = 1..=T`. Index 0 of the
/// cumulative table is the clean boundary, `ᾱ₀ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let betas = match kind {
            ScheduleKind::Linear => linspace(BETA_START, BETA_END, steps),
            ScheduleKind::ScaledLinear => linspace(BETA_START.sqrt(), BETA_END.sqrt(), steps)
                .into_iter()
                .map(|b| b * b)
                .collect(),
            ScheduleKind::Cosine => {
                let f = |tau: usize| {
                    let x = (tau as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0);
                (1..=steps)
                    .map(|tau| {
                        let (prev, cur) = (f(tau - 1) / f0, f(tau) / f0);
                        (1.0 - cur / prev).clamp(0.0, MAX_BETA)
                    })
                    .collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_τ` for `τ ∈ 1..=T`.
    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        1.0 - self.beta(tau)
    }

    /// `ᾱ_τ` for `τ ∈ 0..=T`, with `ᾱ₀ = 1`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bars[tau]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `[ᾱ₀, ᾱ₁, …, ᾱ_T]`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// CSV with columns `tau,beta,alpha,alpha_bar` for `τ = 1..=T`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "beta", "alpha", "alpha_bar"])?;
        for tau in 1..=self.steps() {
            w.write_record([
                tau.to_string(),
                self.beta(tau).to_string(),
                self.alpha(tau).to_string(),
                self.alpha_bar(tau).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<schedule csv>", e))?;
        Ok(())
    }
}
