use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// Quantity the denoiser is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionType {
    Epsilon,
    V,
    X0,
}

impl PredictionType {
    pub const ALL: [PredictionType; 3] = [PredictionType::Epsilon, PredictionType::V, PredictionType::X0];

    pub fn name(self) -> &'static str {
        match self {
            PredictionType::Epsilon => "epsilon",
            PredictionType::V => "v",
            PredictionType::X0 => "x0",
        }
    }
}

impl fmt::Display for PredictionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(PredictionType::Epsilon),
            "v" => Ok(PredictionType::V),
            "x0" | "sample" => Ok(PredictionType::X0),
            other => Err(Error::invalid(format!(
                "unknown prediction type `{other}` (expected epsilon, v or x0)"
            ))),
        }
    }
}

fn check_tau(schedule: &NoiseSchedule, tau: usize) -> Result<()> {
    if tau == 0 || tau > schedule.steps() {
        return Err(Error::invalid(format!(
            "timestep {tau} outside 1..={}",
            schedule.steps()
        )));
    }
    Ok(())
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{what}: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// `x_τ = √ᾱ_τ·x0 + √(1−ᾱ_τ)·ε`.
pub fn forward_sample(x0: &[f64], tau: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    check_tau(schedule, tau)?;
    check_len(x0, eps, "forward_sample")?;
    let ab = schedule.alpha_bar(tau);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// `v = √ᾱ·ε − √(1−ᾱ)·x0`.
pub fn velocity(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * e - b * x).collect()
}

/// Training target for a prediction type given the clean sample and noise.
pub fn target(kind: PredictionType, x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    match kind {
        PredictionType::Epsilon => eps.to_vec(),
        PredictionType::X0 => x0.to_vec(),
        PredictionType::V => velocity(x0, eps, alpha_bar),
    }
}

/// Turns a raw network output into the `(ε̂, x̂0)` pair.
pub fn convert(
    prediction: &[f64],
    kind: PredictionType,
    x_tau: &[f64],
    alpha_bar: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside (0, 1]")));
    }
    check_len(prediction, x_tau, "convert")?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let pairs = prediction.iter().zip(x_tau);
    Ok(match kind {
        PredictionType::Epsilon => {
            let x0 = pairs.map(|(e, x)| (x - b * e) / a).collect();
            (prediction.to_vec(), x0)
        }
        PredictionType::X0 => {
            // With no noise left the residual carries no information.
            let eps = if b == 0.0 {
                vec![0.0; x_tau.len()]
            } else {
                pairs.map(|(x0, x)| (x - a * x0) / b).collect()
            };
            (eps, prediction.to_vec())
        }
        PredictionType::V => {
            let eps = pairs.clone().map(|(v, x)| a * v + b * x).collect();
            let x0 = pairs.map(|(v, x)| a * x - b * v).collect();
            (eps, x0)
        }
    })
}

/// `ε̃ = (1+w)·cond − w·uncond`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect()
}

/// `σ_τ` of the generalized reverse step between two training indices.
pub fn ddim_sigma(alpha_bar: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).sqrt() * (1.0 - alpha_bar / alpha_bar_prev).sqrt()
}

/// One reverse step `x_τ → x_{τ_prev}`. `τ_prev = 0` lands on the clean
/// boundary.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    x_tau: &[f64],
    tau: usize,
    tau_prev: usize,
    eps: &[f64],
    x0_hat: &[f64],
    eta: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_tau(schedule, tau)?;
    if tau_prev >= tau {
        return Err(Error::invalid(format!("tau_prev {tau_prev} must be below tau {tau}")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta {eta} must be finite and non-negative")));
    }
    check_len(x_tau, eps, "ddim_step")?;
    check_len(x_tau, x0_hat, "ddim_step")?;
    let (ab, ab_prev) = (schedule.alpha_bar(tau), schedule.alpha_bar(tau_prev));
    let sigma = ddim_sigma(ab, ab_prev, eta);
    let radicand = 1.0 - ab_prev - sigma * sigma;
    if radicand < -1e-12 {
        return Err(Error::invalid(format!(
            "sigma² = {} exceeds 1 − ᾱ_prev = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let dir = radicand.max(0.0).sqrt();
    let a = ab_prev.sqrt();
    Ok(x0_hat
        .iter()
        .zip(eps)
        .map(|(x0, e)| {
            let noise = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            a * x0 + dir * e + noise
        })
        .collect())
}

/// Mean of the ancestral posterior `q(x_{τ−1} | x_τ, x0)` expressed through
/// the noise estimate: `(x_τ − β_τ/√(1−ᾱ_τ)·ε̂)/√α_τ`.
pub fn posterior_mean(x_tau: &[f64], tau: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_tau(schedule, tau)?;
    check_len(x_tau, eps, "posterior_mean")?;
    let beta = schedule.beta(tau);
    let coef = beta / (1.0 - schedule.alpha_bar(tau)).sqrt();
    let inv = 1.0 / schedule.alpha(tau).sqrt();
    Ok(x_tau.iter().zip(eps).map(|(x, e)| inv * (x - coef * e)).collect())
}

/// Decreasing inference subsequence `τ_k = T − ⌊k·T/T_diff⌋` for
/// `k = 0..T_diff`; always starts at `T`.
pub fn timesteps(train_steps: usize, inference_steps: usize) -> Result<Vec<usize>> {
    if inference_steps == 0 || inference_steps > train_steps {
        return Err(Error::invalid(format!(
            "inference steps {inference_steps} must lie in 1..={train_steps}"
        )));
    }
    Ok((0..inference_steps)
        .map(|k| train_steps - k * train_steps / inference_steps)
        .collect())
}

/// Reverse chain from `x_init` at `τ = T` down to the clean boundary.
/// `predict` returns the (guided) noise estimate `ε̃` at each visited step.
/// With `clip = Some(c)`, `x̂0` is clamped to `[−c, c]` and `ε̃` re-derived
/// to stay consistent with it.
pub fn sample_with<R, F>(
    schedule: &NoiseSchedule,
    inference_steps: usize,
    eta: f64,
    clip: Option<f64>,
    x_init: Vec<f64>,
    rng: &mut R,
    mut predict: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let taus = timesteps(schedule.steps(), inference_steps)?;
    let mut x = x_init;
    for (k, &tau) in taus.iter().enumerate() {
        let tau_prev = taus.get(k + 1).copied().unwrap_or(0);
        let eps = predict(&x, tau)?;
        let ab = schedule.alpha_bar(tau);
        let (mut eps, mut x0) = convert(&eps, PredictionType::Epsilon, &x, ab)?;
        if let Some(c) = clip {
            x0.iter_mut().for_each(|v| *v = v.clamp(-c, c));
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            eps = x.iter().zip(&x0).map(|(xt, x0)| (xt - a * x0) / b).collect();
        }
        x = ddim_step(&x, tau, tau_prev, &eps, &x0, eta, schedule, rng)?;
    }
    Ok(x)
}

/// `clip(⌊x⌋, 0, r_max)` per coordinate; NaN decodes to 0.
pub fn decode(x0: &[f64], r_max: u32) -> Vec<u32> {
    x0.iter()
        .map(|&x| {
            let f = x.floor();
            if f >= r_max as f64 {
                r_max
            } else if f > 0.0 {
                f as u32
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap()
    }

    #[test]
    fn zero_noise_scales_clean_sample() {
        let s = sched();
        let x = forward_sample(&[2.0, -1.0], 10, &s, &[0.0, 0.0]).unwrap();
        let a = s.alpha_bar(10).sqrt();
        assert_eq!(x, vec![2.0 * a, -a]);
        assert!(forward_sample(&[1.0], 0, &s, &[0.0]).is_err());
        assert!(forward_sample(&[1.0], 1001, &s, &[0.0]).is_err());
    }

    #[test]
    fn first_step_is_near_identity() {
        let s = sched();
        let x = forward_sample(&[1.5], 1, &s, &[0.3]).unwrap();
        assert!((x[0] - 1.5).abs() < 0.01);
    }

    #[test]
    fn clean_boundary_ignores_noise_estimate() {
        let (_, x0) = convert(&[5.0, -3.0], PredictionType::Epsilon, &[0.2, 0.4], 1.0).unwrap();
        assert_eq!(x0, vec![0.2, 0.4]);
        assert!(convert(&[0.0], PredictionType::Epsilon, &[0.0], 0.0).is_err());
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(cfg_combine(&[2.0], &[1.0], 1.0), vec![3.0]);
        assert_eq!(cfg_combine(&[2.0, 4.0], &[9.0, 9.0], 0.0), vec![2.0, 4.0]);
        assert_eq!(cfg_combine(&[0.5], &[0.5], 7.0), vec![0.5]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&[3.7, -1.2, 9.5], 8), vec![3, 0, 8]);
        assert_eq!(decode(&[0.0, 4.0, 8.0], 8), vec![0, 4, 8]);
        assert_eq!(decode(&[f64::NAN, f64::INFINITY, f64::NEG_INFINITY], 8), vec![0, 8, 0]);
    }

    #[test]
    fn subsequence_shape() {
        assert_eq!(timesteps(10, 5).unwrap(), vec![10, 8, 6, 4, 2]);
        assert_eq!(timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(timesteps(7, 7).unwrap(), (1..=7).rev().collect::<Vec<_>>());
        assert!(timesteps(10, 11).is_err());
        assert!(timesteps(10, 0).is_err());
    }

    #[test]
    fn oversized_eta_is_rejected() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = ddim_step(&[0.0], 500, 100, &[0.0], &[0.0], 50.0, &s, &mut rng);
        assert!(r.is_err());
        assert!(ddim_step(&[0.0], 100, 100, &[0.0], &[0.0], 0.0, &s, &mut rng).is_err());
    }

    #[test]
    fn posterior_mean_matches_ancestral_form() {
        // Oracle: the x0-form posterior mean with x0 recovered from (x_τ, ε).
        let s = sched();
        let (tau, x0, eps) = (300, 0.7, -1.1);
        let xt = forward_sample(&[x0], tau, &s, &[eps]).unwrap()[0];
        let (ab, abp, beta) = (s.alpha_bar(tau), s.alpha_bar(tau - 1), s.beta(tau));
        let expected = abp.sqrt() * beta / (1.0 - ab) * x0
            + s.alpha(tau).sqrt() * (1.0 - abp) / (1.0 - ab) * xt;
        let got = posterior_mean(&[xt], tau, &[eps], &s).unwrap()[0];
        assert!((got - expected).abs() < 1e-12);
    }
}
