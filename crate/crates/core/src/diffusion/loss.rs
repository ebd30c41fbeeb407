use rand::Rng;
use rand_distr::StandardNormal;

use super::denoiser::{Denoiser, DenoiserInput};
use super::process::{forward_sample, target, PredictionType};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// One conditioning pair for the refiner, in latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x0: Vec<f64>,
    pub cond: Vec<f64>,
    pub reward: f64,
}

/// Per-example corruption draw: timestep, noise and condition dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub tau: usize,
    pub eps: Vec<f64>,
    pub drop_cond: bool,
}

pub fn draw_noise<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Vec<NoiseDraw> {
    (0..n)
        .map(|_| {
            let tau = rng.random_range(1..=schedule.steps());
            let eps = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let drop_cond = p_uncond > 0.0 && rng.random::<f64>() < p_uncond;
            NoiseDraw { tau, eps, drop_cond }
        })
        .collect()
}

/// Reward-alignment weights `ω_i^κ = exp(κ·z_i)` normalized to mean 1, where
/// `z_i = clamp((R_i − R̄)/(temperature·std(R)), −5, 5)`.
pub fn reward_weights(rewards: &[f64], kappa: f64, temperature: f64) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = temperature * std;
    if kappa == 0.0 || !(scale > 1e-12) {
        return vec![1.0; n];
    }
    let raw: Vec<f64> = rewards
        .iter()
        .map(|r| (kappa * ((r - mean) / scale).clamp(-5.0, 5.0)).exp())
        .collect();
    let norm = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|w| w / norm).collect()
}

/// Builds the weighted denoising objective
/// `(1/(nD)) Σ_i w_i ‖target_i − f(x_τ,i)‖²` on `tape`.
pub fn loss_on_tape(
    tape: &mut Tape,
    net: &Denoiser,
    kind: PredictionType,
    schedule: &NoiseSchedule,
    batch: &[TrainingExample],
    draws: &[NoiseDraw],
    weights: &[f64],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("denoising loss needs a nonempty batch"));
    }
    if draws.len() != batch.len() || weights.len() != batch.len() {
        return Err(Error::invalid("batch, draws and weights must align"));
    }
    let d = net.shape.action_dim;
    let mut noisy = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * d);
    for (ex, dr) in batch.iter().zip(draws) {
        noisy.push(forward_sample(&ex.x0, dr.tau, schedule, &dr.eps)?);
        targets.extend(target(kind, &ex.x0, &dr.eps, schedule.alpha_bar(dr.tau)));
    }
    let rows: Vec<DenoiserInput<'_>> = batch
        .iter()
        .zip(draws)
        .zip(&noisy)
        .map(|((ex, dr), x)| DenoiserInput {
            x_tau: x,
            tau: dr.tau,
            cond: (!dr.drop_cond).then_some(ex.cond.as_slice()),
        })
        .collect();
    let pred = net.predict_tape(tape, &rows)?;
    let tgt = tape.constant(Matrix::from_vec(batch.len(), d, targets)?);
    let diff = tape.sub(pred, tgt)?;
    let sq = tape.square(diff);
    let per_row = tape.sum_cols(sq);
    let w = tape.constant(Matrix::column(weights.to_vec()));
    let weighted = tape.mul(per_row, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / (batch.len() * d) as f64))
}

/// Draws corruption, weights by reward and returns the loss value; with
/// `accumulate` the parameter gradients are added into the denoiser's store.
#[allow(clippy::too_many_arguments)]
pub fn ddim_loss<R: Rng + ?Sized>(
    net: &mut Denoiser,
    kind: PredictionType,
    schedule: &NoiseSchedule,
    batch: &[TrainingExample],
    kappa: f64,
    temperature: f64,
    p_uncond: f64,
    accumulate: bool,
    rng: &mut R,
) -> Result<f64> {
    let draws = draw_noise(batch.len(), net.shape.action_dim, schedule, p_uncond, rng);
    let rewards: Vec<f64> = batch.iter().map(|e| e.reward).collect();
    let weights = reward_weights(&rewards, kappa, temperature);
    let mut tape = Tape::new();
    let loss = loss_on_tape(&mut tape, net, kind, schedule, batch, &draws, &weights)?;
    let value = tape.value(loss).item();
    if accumulate {
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut net.store);
    }
    Ok(value)
}
