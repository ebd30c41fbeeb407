//! Conditional denoising refiner: noise schedules, forward corruption, the
//! residual denoiser, guided deterministic sampling and its training loss.

mod denoiser;
mod loss;
mod process;
mod schedule;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use denoiser::{timestep_embedding, Denoiser, DenoiserInput, DenoiserShape};
pub use loss::{draw_noise, ddim_loss, loss_on_tape, reward_weights, NoiseDraw, TrainingExample};
pub use process::{
    cfg_combine, convert, ddim_sigma, ddim_step, decode, forward_sample, posterior_mean,
    sample_with, target, timesteps, velocity, PredictionType,
};
pub use schedule::{NoiseSchedule, ScheduleKind, BETA_END, BETA_START, COSINE_OFFSET, MAX_BETA};

use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, Adam, Checkpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    /// Training steps `T` of the forward process.
    pub train_steps: usize,
    /// Reverse steps `T_diff` used at sampling time.
    pub inference_steps: usize,
    /// Sampling stochasticity; 0 is fully deterministic given the latent.
    pub eta: f64,
    pub guidance: f64,
    pub prediction: PredictionType,
    pub kappa: f64,
    pub p_uncond: f64,
    pub lr: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    /// Reward weights are centred and divided by this multiple of the batch
    /// reward standard deviation before exponentiation.
    pub reward_temperature: f64,
    pub samples_per_episode: usize,
    pub minibatch: usize,
    pub grad_clip: f64,
    /// Clamp `x̂0` to the action box during sampling.
    pub clip_sample: bool,
    /// Latent half-width of the action box. At 3 the box spans three
    /// standard deviations of the initial latent, so the untrained sampler's
    /// output already sits mostly inside it.
    pub latent_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Linear,
            train_steps: 1000,
            inference_steps: 50,
            eta: 0.0,
            guidance: 1.5,
            prediction: PredictionType::V,
            kappa: 0.1,
            p_uncond: 0.1,
            lr: 5e-5,
            hidden: 256,
            embed_dim: 64,
            blocks: 2,
            reward_temperature: 1.0,
            samples_per_episode: 256,
            minibatch: 32,
            grad_clip: 1.0,
            clip_sample: true,
            latent_scale: 3.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str, reason: &str| Err(Error::config(format!("diffusion.{name}"), reason));
        if self.train_steps == 0 {
            return f("train_steps", "must be at least 1");
        }
        if self.inference_steps == 0 || self.inference_steps > self.train_steps {
            return f("inference_steps", "must lie in 1..=train_steps");
        }
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return f("eta", "must lie in [0, 1]");
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return f("guidance", "must be finite and non-negative");
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return f("kappa", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return f("p_uncond", "must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return f("lr", "must be positive");
        }
        if self.hidden == 0 {
            return f("hidden", "must be positive");
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return f("embed_dim", "must be a positive even number");
        }
        if !(self.reward_temperature > 0.0 && self.reward_temperature.is_finite()) {
            return f("reward_temperature", "must be positive");
        }
        if self.minibatch == 0 {
            return f("minibatch", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return f("grad_clip", "must be positive");
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return f("latent_scale", "must be positive and finite");
        }
        Ok(())
    }
}

/// Coarse-to-fine action refiner. Actions live in `[0, r_max + 1]` per
/// coordinate; the network works on the affine image of that box in
/// `[−s, s]` with `s = latent_scale`, and clean training targets are bin centres `ã + 0.5` so that
/// flooring returns `ã`.
#[derive(Debug, Clone)]
pub struct Refiner {
    config: DiffusionConfig,
    schedule: NoiseSchedule,
    net: Denoiser,
    adam: Adam,
    r_max: u32,
    half_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinerUpdate {
    pub mean_loss: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Coarse action, refined ranks and the reward they earned.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementRecord {
    pub coarse: Vec<f64>,
    pub refined: Vec<u32>,
    pub reward: f64,
}

impl Refiner {
    pub fn new<R: Rng + ?Sized>(config: &DiffusionConfig, action_dim: usize, r_max: u32, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::build(config.schedule, config.train_steps)?;
        let net = Denoiser::new(
            DenoiserShape {
                action_dim,
                hidden: config.hidden,
                embed_dim: config.embed_dim,
                blocks: config.blocks,
            },
            rng,
        )?;
        let adam = Adam::new(&net.store, config.lr);
        Ok(Self {
            config: config.clone(),
            schedule,
            net,
            adam,
            r_max,
            half_width: (r_max as f64 + 1.0) / 2.0,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.net
    }

    pub fn action_dim(&self) -> usize {
        self.net.shape.action_dim
    }

    pub fn to_latent(&self, action: f64) -> f64 {
        self.config.latent_scale * (action - self.half_width) / self.half_width
    }

    pub fn from_latent(&self, z: f64) -> f64 {
        z / self.config.latent_scale * self.half_width + self.half_width
    }

    /// Coarse actions outside the box decode to its edge, so the condition
    /// is clamped there.
    fn cond_latent(&self, coarse: &[f64]) -> Vec<f64> {
        let s = self.config.latent_scale;
        coarse.iter().map(|&a| self.to_latent(a).clamp(-s, s)).collect()
    }

    fn target_latent(&self, refined: &[u32]) -> Vec<f64> {
        refined.iter().map(|&r| self.to_latent(r as f64 + 0.5)).collect()
    }

    /// Guided noise estimate `ε̃` at a latent point.
    fn guided_eps(&self, x: &[f64], tau: usize, cond: &[f64]) -> Result<Vec<f64>> {
        let ab = self.schedule.alpha_bar(tau);
        let kind = self.config.prediction;
        let w = self.config.guidance;
        let mut rows = vec![DenoiserInput { x_tau: x, tau, cond: Some(cond) }];
        if w != 0.0 {
            rows.push(DenoiserInput { x_tau: x, tau, cond: None });
        }
        let out = self.net.predict(&rows)?;
        let (eps_c, _) = convert(out.row(0), kind, x, ab)?;
        if w == 0.0 {
            return Ok(eps_c);
        }
        let (eps_u, _) = convert(out.row(1), kind, x, ab)?;
        Ok(cfg_combine(&eps_c, &eps_u, w))
    }

    /// Continuous refined action (before flooring) for a coarse action.
    pub fn sample<R: Rng + ?Sized>(&self, coarse: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if coarse.len() != self.action_dim() {
            return Err(Error::invalid(format!(
                "coarse action has {} entries, expected {}",
                coarse.len(),
                self.action_dim()
            )));
        }
        let cond = self.cond_latent(coarse);
        let init: Vec<f64> = (0..cond.len()).map(|_| rng.sample(StandardNormal)).collect();
        let clip = self.config.clip_sample.then_some(self.config.latent_scale);
        let z = sample_with(
            &self.schedule,
            self.config.inference_steps,
            self.config.eta,
            clip,
            init,
            rng,
            |x, tau| self.guided_eps(x, tau, &cond),
        )?;
        Ok(z.into_iter().map(|v| self.from_latent(v)).collect())
    }

    pub fn refine<R: Rng + ?Sized>(&self, coarse: &[f64], rng: &mut R) -> Result<Vec<u32>> {
        Ok(decode(&self.sample(coarse, rng)?, self.r_max))
    }

    /// Reward-weighted denoising updates over `samples_per_episode` draws
    /// from `records`, split into minibatches.
    pub fn update<R: Rng + ?Sized>(&mut self, records: &[RefinementRecord], rng: &mut R) -> Result<RefinerUpdate> {
        if records.is_empty() {
            return Err(Error::invalid("refiner update needs at least one record"));
        }
        let examples: Vec<TrainingExample> = records
            .iter()
            .map(|r| TrainingExample {
                x0: self.target_latent(&r.refined),
                cond: self.cond_latent(&r.coarse),
                reward: r.reward,
            })
            .collect();
        let total = self.config.samples_per_episode.max(1);
        let mb = self.config.minibatch.min(total);
        let mut remaining = total;
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        while remaining > 0 {
            let take = mb.min(remaining);
            remaining -= take;
            let batch: Vec<TrainingExample> = (0..take)
                .map(|_| examples[rng.random_range(0..examples.len())].clone())
                .collect();
            self.net.store.zero_grad();
            let loss = ddim_loss(
                &mut self.net,
                self.config.prediction,
                &self.schedule,
                &batch,
                self.config.kappa,
                self.config.reward_temperature,
                self.config.p_uncond,
                true,
                rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { what: "denoising loss", step: self.adam.steps_taken() });
            }
            norm_sum += clip_grad_norm(&mut self.net.store, self.config.grad_clip);
            self.adam.step(&mut self.net.store);
            loss_sum += loss;
            batches += 1;
        }
        Ok(RefinerUpdate {
            mean_loss: loss_sum / batches as f64,
            grad_norm: norm_sum / batches as f64,
            minibatches: batches,
        })
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push_store("diffusion", &self.net.store);
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore_store("diffusion", &mut self.net.store)?;
        self.adam = Adam::new(&self.net.store, self.config.lr);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DiffusionConfig {
        DiffusionConfig {
            train_steps: 100,
            inference_steps: 10,
            hidden: 16,
            embed_dim: 8,
            samples_per_episode: 8,
            minibatch: 4,
            ..DiffusionConfig::default()
        }
    }

    #[test]
    fn latent_map_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Refiner::new(&tiny(), 6, 8, &mut rng).unwrap();
        assert_eq!(r.to_latent(0.0), -3.0);
        assert_eq!(r.to_latent(9.0), 3.0);
        assert_eq!(r.from_latent(r.to_latent(3.25)), 3.25);
    }

    #[test]
    fn refined_ranks_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Refiner::new(&tiny(), 6, 8, &mut rng).unwrap();
        let ranks = r.refine(&[4.0, 0.0, 8.0, 100.0, -50.0, 2.0], &mut rng).unwrap();
        assert!(ranks.iter().all(|&v| v <= 8));
    }

    #[test]
    fn update_reports_minibatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = Refiner::new(&tiny(), 6, 8, &mut rng).unwrap();
        let recs = vec![
            RefinementRecord { coarse: vec![4.0; 6], refined: vec![3; 6], reward: -1.0 },
            RefinementRecord { coarse: vec![2.0; 6], refined: vec![5; 6], reward: -0.5 },
        ];
        let u = r.update(&recs, &mut rng).unwrap();
        assert_eq!(u.minibatches, 2);
        assert!(u.mean_loss.is_finite());
    }
}
