use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ranks::{RankVector, MODULES_PER_LAYER};
use crate::corpus::ComplexityStats;
use crate::error::{Error, Result};

/// Source of the task loss `U(r)` for a deployed rank configuration.
pub trait LossOracle: Send {
    fn loss(
        &mut self,
        ranks: &RankVector,
        stats: &ComplexityStats,
        rng: &mut dyn RngCore,
    ) -> Result<f64>;
}

/// Per-module importance: a weight per projection kind, scaled linearly over
/// depth from `1 + layer_slope` at the first layer to `1 - layer_slope` at
/// the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceProfile {
    pub module_weights: [f64; MODULES_PER_LAYER],
    pub layer_slope: f64,
}

impl Default for ImportanceProfile {
    fn default() -> Self {
        // O and fc1 carry twice the weight of the other projections.
        Self {
            module_weights: [1.0, 1.0, 1.0, 2.0, 2.0, 1.0],
            layer_slope: 0.5,
        }
    }
}

impl ImportanceProfile {
    pub fn uniform() -> Self {
        Self {
            module_weights: [1.0; MODULES_PER_LAYER],
            layer_slope: 0.0,
        }
    }

    pub fn weights(&self, layers: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(layers * MODULES_PER_LAYER);
        for l in 0..layers {
            let depth = if layers > 1 {
                1.0 - 2.0 * l as f64 / (layers - 1) as f64
            } else {
                0.0
            };
            let scale = 1.0 + self.layer_slope * depth;
            w.extend(self.module_weights.iter().map(|m| m * scale));
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.module_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("env.surrogate.importance.module_weights", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.layer_slope) {
            return Err(Error::config("env.surrogate.importance.layer_slope", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateParams {
    pub base_loss: f64,
    pub entropy_gain: f64,
    pub oov_gain: f64,
    pub obs_noise: f64,
    #[serde(default)]
    pub importance: ImportanceProfile,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            base_loss: 0.25,
            entropy_gain: 0.5,
            oov_gain: 1.0,
            obs_noise: 0.01,
            importance: ImportanceProfile::default(),
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("env.surrogate.{name}"), format!("must be finite and non-negative, got {v}")))
            }
        };
        if !self.base_loss.is_finite() {
            return Err(Error::config("env.surrogate.base_loss", "must be finite"));
        }
        nonneg("entropy_gain", self.entropy_gain)?;
        nonneg("oov_gain", self.oov_gain)?;
        nonneg("obs_noise", self.obs_noise)?;
        self.importance.validate()
    }
}

/// Cheap stand-in for the fine-tuning loss:
///
/// `U = u₀ + c(H, ρ) · Σ w/(1 + r) / n + noise`, with
/// `c = 1 + a_H·H/log₂|V| + a_ρ·ρ`.
///
/// Each adapter contributes a harmonic saturation term, so returns in rank
/// diminish and `U` never drops below `u₀` when noise is off.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateLossModel {
    pub base_loss: f64,
    pub weights: Vec<f64>,
    pub entropy_gain: f64,
    pub oov_gain: f64,
    pub obs_noise: f64,
    pub vocab_size: usize,
}

impl SurrogateLossModel {
    pub fn new(params: &SurrogateParams, layers: usize, vocab_size: usize) -> Self {
        Self {
            base_loss: params.base_loss,
            weights: params.importance.weights(layers),
            entropy_gain: params.entropy_gain,
            oov_gain: params.oov_gain,
            obs_noise: params.obs_noise,
            vocab_size,
        }
    }

    pub fn complexity_gain(&self, stats: &ComplexityStats) -> f64 {
        let max_entropy = (self.vocab_size.max(2) as f64).log2();
        1.0 + self.entropy_gain * stats.entropy_bits / max_entropy + self.oov_gain * stats.oov_rate
    }

    /// Noise-free loss.
    pub fn expected_loss(&self, ranks: &RankVector, stats: &ComplexityStats) -> f64 {
        let n = ranks.len() as f64;
        let sat: f64 = ranks
            .as_slice()
            .iter()
            .zip(&self.weights)
            .map(|(&r, w)| w / (1.0 + r as f64))
            .sum();
        self.base_loss + self.complexity_gain(stats) * sat / n
    }
}

impl LossOracle for SurrogateLossModel {
    fn loss(
        &mut self,
        ranks: &RankVector,
        stats: &ComplexityStats,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        if ranks.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "rank vector has {} entries, surrogate expects {}",
                ranks.len(),
                self.weights.len()
            )));
        }
        let mut u = self.expected_loss(ranks, stats);
        if self.obs_noise > 0.0 {
            u += Normal::new(0.0, self.obs_noise).expect("validated").sample(rng);
        }
        Ok(u)
    }
}
