//! Slow-fading AWGN link from the cloud to the edge device: SNR, achievable
//! rate, adapter transmission time and the normalized communication cost.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::RankVector;
use crate::error::{Error, Result};

/// Fading law for the block gain `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fading {
    /// Deterministic real gain.
    FixedGain { gain: f64 },
    /// `h ~ CN(0, scale)`, so `E|h|² = scale`.
    Rayleigh { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub bandwidth_hz: f64,
    pub transmit_power: f64,
    pub noise_power: f64,
    pub fading: Fading,
    #[serde(default = "default_bits")]
    pub bits_per_parameter: u32,
    #[serde(default = "default_draws")]
    pub expectation_draws: u32,
}

fn default_bits() -> u32 {
    32
}

fn default_draws() -> u32 {
    1
}

impl Default for ChannelParams {
    /// Fixed 5 dB link over 100 MHz.
    fn default() -> Self {
        Self::fixed_snr_db(5.0, 1e8)
    }
}

impl ChannelParams {
    /// Unit-noise Rayleigh link with `E|h|² = 1` and mean SNR `snr_db`.
    pub fn rayleigh_mean_snr_db(snr_db: f64, bandwidth_hz: f64) -> Self {
        Self {
            bandwidth_hz,
            transmit_power: db_to_linear(snr_db),
            noise_power: 1.0,
            fading: Fading::Rayleigh { scale: 1.0 },
            bits_per_parameter: 32,
            expectation_draws: 1,
        }
    }

    /// Rescales the transmit power so the mean SNR becomes `snr_db`.
    pub fn set_mean_snr_db(&mut self, snr_db: f64) {
        let current = self.mean_snr_db();
        self.transmit_power *= db_to_linear(snr_db - current);
    }

    /// Unit-gain, unit-noise link whose SNR is `snr_db`.
    pub fn fixed_snr_db(snr_db: f64, bandwidth_hz: f64) -> Self {
        Self {
            bandwidth_hz,
            transmit_power: db_to_linear(snr_db),
            noise_power: 1.0,
            fading: Fading::FixedGain { gain: 1.0 },
            bits_per_parameter: 32,
            expectation_draws: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("channel.{name}"), format!("must be positive and finite, got {v}")))
            }
        };
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("transmit_power", self.transmit_power)?;
        positive("noise_power", self.noise_power)?;
        match self.fading {
            Fading::FixedGain { gain } => positive("fading.gain", gain)?,
            Fading::Rayleigh { scale } => positive("fading.scale", scale)?,
        }
        if self.bits_per_parameter == 0 {
            return Err(Error::config("channel.bits_per_parameter", "must be at least 1"));
        }
        if self.expectation_draws == 0 {
            return Err(Error::config("channel.expectation_draws", "must be at least 1"));
        }
        Ok(())
    }

    /// SNR of the average link, `E|h|² P / σ²`, in dB.
    pub fn mean_snr_db(&self) -> f64 {
        let g2 = match self.fading {
            Fading::FixedGain { gain } => gain * gain,
            Fading::Rayleigh { scale } => scale,
        };
        linear_to_db(g2 * self.transmit_power / self.noise_power)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub gain: Complex64,
    pub snr_linear: f64,
    pub snr_db: f64,
    pub capacity_bps: f64,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Shannon rate `W·log₂(1 + snr)`.
pub fn shannon_capacity(bandwidth_hz: f64, snr_linear: f64) -> f64 {
    bandwidth_hz * (1.0 + snr_linear).log2()
}

fn draw_gain<R: Rng + ?Sized>(fading: Fading, rng: &mut R) -> Complex64 {
    match fading {
        Fading::FixedGain { gain } => Complex64::new(gain, 0.0),
        Fading::Rayleigh { scale } => {
            let s = (scale / 2.0).sqrt();
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(s * re, s * im)
        }
    }
}

/// Draws the block gain and averages the achievable rate over
/// `expectation_draws` gains (the first being the block gain itself).
pub fn realize<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> ChannelRealization {
    let snr_of = |h: Complex64| h.norm_sqr() * params.transmit_power / params.noise_power;
    let gain = draw_gain(params.fading, rng);
    let snr_linear = snr_of(gain);
    let capacity_bps = match params.fading {
        Fading::FixedGain { .. } => shannon_capacity(params.bandwidth_hz, snr_linear),
        Fading::Rayleigh { .. } => {
            let mut total = shannon_capacity(params.bandwidth_hz, snr_linear);
            for _ in 1..params.expectation_draws {
                total += shannon_capacity(params.bandwidth_hz, snr_of(draw_gain(params.fading, rng)));
            }
            total / params.expectation_draws as f64
        }
    };
    ChannelRealization {
        gain,
        snr_linear,
        snr_db: linear_to_db(snr_linear),
        capacity_bps,
    }
}

/// Parameters shipped per unit of rank: `P` column, `Q` row and one singular value.
#[inline]
pub fn params_per_rank(hidden_dim: usize) -> u64 {
    2 * hidden_dim as u64 + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmitTime {
    pub per_module: Vec<f64>,
    pub total: f64,
}

/// Per-module and total seconds to ship the adapters for `ranks` at rate
/// `capacity_bps`.
pub fn transmit_time(
    ranks: &RankVector,
    hidden_dim: usize,
    bits_per_parameter: u32,
    capacity_bps: f64,
) -> Result<TransmitTime> {
    if !(capacity_bps > 0.0) {
        return Err(Error::invalid(format!("capacity must be positive, got {capacity_bps}")));
    }
    let unit = params_per_rank(hidden_dim) as f64 * bits_per_parameter as f64;
    let per_module: Vec<f64> = ranks
        .as_slice()
        .iter()
        .map(|&r| r as f64 * unit / capacity_bps)
        .collect();
    let total = per_module.iter().sum();
    Ok(TransmitTime { per_module, total })
}

/// `η = Σ r(2d_h+1)·b / (C·T_max)`; `η ≤ 1` exactly when the latency budget holds.
pub fn comm_cost(
    ranks: &RankVector,
    hidden_dim: usize,
    bits_per_parameter: u32,
    capacity_bps: f64,
    t_max: f64,
) -> Result<f64> {
    if !(capacity_bps > 0.0) {
        return Err(Error::invalid(format!("capacity must be positive, got {capacity_bps}")));
    }
    if !(t_max > 0.0) {
        return Err(Error::invalid(format!("latency budget must be positive, got {t_max}")));
    }
    let bits = ranks.total_rank() as f64 * params_per_rank(hidden_dim) as f64 * bits_per_parameter as f64;
    Ok(bits / (capacity_bps * t_max))
}

/// Adapter parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// `Σ r(2d_h + 1)`: both factors plus the singular values.
    WithLambda,
    /// `Σ r·2d_h`: factors only.
    PqOnly,
}

pub fn param_count(ranks: &RankVector, hidden_dim: usize, mode: CountMode) -> u64 {
    let per = match mode {
        CountMode::WithLambda => params_per_rank(hidden_dim),
        CountMode::PqOnly => 2 * hidden_dim as u64,
    };
    ranks.total_rank() * per
}

/// `y = h·c + n`, `n ~ CN(0, σ² I)`.
pub fn received_signal<R: Rng + ?Sized>(
    codeword: &[Complex64],
    gain: Complex64,
    noise_power: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if codeword.is_empty() {
        return Err(Error::invalid("codeword must be nonempty"));
    }
    let s = (noise_power / 2.0).sqrt();
    Ok(codeword
        .iter()
        .map(|&c| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            gain * c + Complex64::new(s * re, s * im)
        })
        .collect())
}
