//! Gaussian-head proximal policy optimization over continuous coarse rank
//! vectors, with generalized advantage estimation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, Adam, Checkpoint, Linear, Matrix, ParamId, ParamStore, Tape, Var};

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    /// GAE smoothing `ζ`.
    pub zeta: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub hidden: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub init_log_std: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            zeta: 0.95,
            clip: 0.2,
            lr: 1e-4,
            epochs: 4,
            minibatch: 32,
            hidden: 256,
            value_coef: 1.0,
            entropy_coef: 0.0,
            init_log_std: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str, reason: &str| Err(Error::config(format!("ppo.{name}"), reason));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return f("gamma", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return f("zeta", "must lie in [0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return f("clip", "must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return f("lr", "must be positive");
        }
        if self.epochs == 0 {
            return f("epochs", "must be at least 1");
        }
        if self.minibatch == 0 {
            return f("minibatch", "must be at least 1");
        }
        if self.hidden == 0 {
            return f("hidden", "must be positive");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return f("value_coef", "loss coefficients must be non-negative");
        }
        if !self.init_log_std.is_finite() {
            return f("init_log_std", "must be finite");
        }
        if !(self.max_grad_norm > 0.0) {
            return f("max_grad_norm", "must be positive");
        }
        Ok(())
    }
}

/// Backward recursion `Â_t = δ_t + γζ(1 − done_t)Â_{t+1}` with
/// `δ_t = R_t + γ(1 − done_t)V(s_{t+1}) − V(s_t)`. `bootstrap` is the value of
/// the state after the last transition (ignored when that step is terminal).
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, zeta: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::invalid("advantage estimation needs a nonempty trajectory"));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::invalid("rewards, values and done flags must align"));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * cont * next_value - values[t];
        next_adv = delta + gamma * zeta * cont * next_adv;
        adv[t] = next_adv;
    }
    Ok(adv)
}

/// Shift and scale to zero mean, unit standard deviation. A constant input
/// maps to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return Vec::new();
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

/// Log density of a diagonal Gaussian.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), s)| {
            let z = (x - m) * (-s).exp();
            -0.5 * z * z - s - HALF_LN_TWO_PI
        })
        .sum()
}

/// Policy mean network, learnable log-std and value network.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub store: ParamStore,
    state_dim: usize,
    action_dim: usize,
    pi_hidden: Linear,
    pi_out: Linear,
    log_std: ParamId,
    center: f64,
    scale: f64,
    v_hidden: Linear,
    v_out: Linear,
}

impl ActorCritic {
    /// The mean head is `center + scale·(W h + b)`, so the untrained policy
    /// proposes `center` in every coordinate and one optimizer step moves
    /// the mean in units of `scale`.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &PpoConfig,
        center: f64,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::invalid("policy dimensions must be positive"));
        }
        if !(scale > 0.0 && scale.is_finite() && center.is_finite()) {
            return Err(Error::invalid("policy output scale must be positive and finite"));
        }
        let h = config.hidden;
        let mut store = ParamStore::new();
        let pi_hidden = Linear::new(&mut store, "policy.hidden", state_dim, h, 1.0, rng);
        let pi_out = Linear::new(&mut store, "policy.out", h, action_dim, 0.01, rng);
        let log_std = store.add("policy.log_std", Matrix::filled(1, action_dim, config.init_log_std));
        let v_hidden = Linear::new(&mut store, "value.hidden", state_dim, h, 1.0, rng);
        let v_out = Linear::new(&mut store, "value.out", h, 1, 1.0, rng);
        Ok(Self {
            store,
            state_dim,
            action_dim,
            pi_hidden,
            pi_out,
            log_std,
            center,
            scale,
            v_hidden,
            v_out,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn log_std(&self) -> &[f64] {
        self.store.value(self.log_std).data()
    }

    pub fn set_log_std(&mut self, v: f64) {
        self.store.param_mut(self.log_std).value.fill(v);
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::invalid(format!(
                "state has {} features, policy expects {}",
                s.len(),
                self.state_dim
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("state features must be finite"));
        }
        Ok(())
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let x = Matrix::row_vector(state.to_vec());
        let h = self.pi_hidden.forward(&self.store, &x)?.map(f64::tanh);
        let out = self.pi_out.forward(&self.store, &h)?;
        Ok(out.data().iter().map(|u| self.center + self.scale * u).collect())
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        self.check_state(state)?;
        let x = Matrix::row_vector(state.to_vec());
        let h = self.v_hidden.forward(&self.store, &x)?.map(f64::tanh);
        Ok(self.v_out.forward(&self.store, &h)?.item())
    }

    /// Samples `a ~ N(mean(s), exp(log_std)²)` and returns its log density.
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mean = self.mean(state)?;
        let log_std = self.log_std();
        let action: Vec<f64> = mean
            .iter()
            .zip(log_std)
            .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(&action, &mean, log_std);
        Ok((action, lp))
    }

    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mean = self.mean(state)?;
        Ok(gaussian_log_prob(action, &mean, self.log_std()))
    }

    fn mean_tape(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        let h = self.pi_hidden.forward_tape(tape, &self.store, states)?;
        let h = tape.tanh(h);
        let out = self.pi_out.forward_tape(tape, &self.store, h)?;
        let out = tape.scale(out, self.scale);
        Ok(tape.add_scalar(out, self.center))
    }

    fn value_tape(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        let h = self.v_hidden.forward_tape(tape, &self.store, states)?;
        let h = tape.tanh(h);
        self.v_out.forward_tape(tape, &self.store, h)
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.push_store("ppo", &self.store);
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore_store("ppo", &mut self.store)
    }
}

/// Flat rollout batch for one update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state following the final transition.
    pub bootstrap_value: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("rollout is empty"));
        }
        if [self.states.len(), self.actions.len(), self.log_probs.len(), self.values.len(), self.dones.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::invalid("rollout fields have different lengths"));
        }
        Ok(())
    }
}

/// Tensors for one minibatch of the clipped objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub states: Matrix,
    pub actions: Matrix,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl LossBatch {
    fn select(rollout: &Rollout, adv: &[f64], returns: &[f64], idx: &[usize]) -> Result<Self> {
        let rows = |src: &[Vec<f64>]| -> Result<Matrix> {
            let cols = src[idx[0]].len();
            let data = idx.iter().flat_map(|&i| src[i].iter().copied()).collect();
            Matrix::from_vec(idx.len(), cols, data)
        };
        Ok(Self {
            states: rows(&rollout.states)?,
            actions: rows(&rollout.actions)?,
            old_log_probs: idx.iter().map(|&i| rollout.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| adv[i]).collect(),
            returns: idx.iter().map(|&i| returns[i]).collect(),
        })
    }
}

/// Handles to the terms of the objective on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub ratio: Var,
}

/// `−E[min(ρÂ, clip(ρ, 1−ϱ, 1+ϱ)Â)] + c_v·E[(V − R̂)²] − c_H·H`, with
/// `ρ = exp(log π − log π_old)`.
pub fn ppo_loss(tape: &mut Tape, net: &ActorCritic, batch: &LossBatch, config: &PpoConfig) -> Result<LossTerms> {
    let n = batch.states.rows();
    if n == 0 {
        return Err(Error::invalid("empty minibatch"));
    }
    let d = net.action_dim;
    let states = tape.constant(batch.states.clone());
    let actions = tape.constant(batch.actions.clone());
    let mean = net.mean_tape(tape, states)?;
    let log_std = tape.param(&net.store, net.log_std);

    let diff = tape.sub(actions, mean)?;
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let inv_rows = tape.broadcast_rows(inv_std, n)?;
    let z = tape.mul(diff, inv_rows)?;
    let z2 = tape.square(z);
    let quad = tape.sum_cols(z2);
    let quad = tape.scale(quad, -0.5);
    let log_det = tape.sum(log_std);
    let log_det = tape.broadcast_rows(log_det, n)?;
    let log_prob = tape.sub(quad, log_det)?;
    let log_prob = tape.add_scalar(log_prob, -(d as f64) * HALF_LN_TWO_PI);

    let old = tape.constant(Matrix::column(batch.old_log_probs.clone()));
    let log_ratio = tape.sub(log_prob, old)?;
    let ratio = tape.exp(log_ratio);
    let adv = tape.constant(Matrix::column(batch.advantages.clone()));
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surrogate = tape.mean(surrogate);
    let policy = tape.scale(surrogate, -1.0);

    let v = net.value_tape(tape, states)?;
    let ret = tape.constant(Matrix::column(batch.returns.clone()));
    let verr = tape.sub(v, ret)?;
    let verr = tape.square(verr);
    let value = tape.mean(verr);

    let weighted_v = tape.scale(value, config.value_coef);
    let mut total = tape.add(policy, weighted_v)?;
    if config.entropy_coef > 0.0 {
        // Entropy of the diagonal Gaussian is Σ log σ + const.
        let ent = tape.sum(log_std);
        let ent = tape.scale(ent, -config.entropy_coef);
        total = tape.add(total, ent)?;
    }
    Ok(LossTerms {
        total,
        policy,
        value,
        ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub mean_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    /// Mean absolute gap between the value estimate and the return target
    /// before the update.
    pub value_error: f64,
    pub first_epoch_max_ratio_dev: f64,
    pub minibatches: usize,
}

/// Actor-critic with its optimizer.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub config: PpoConfig,
    pub net: ActorCritic,
    adam: Adam,
}

impl PpoAgent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &PpoConfig,
        center: f64,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let net = ActorCritic::new(state_dim, action_dim, config, center, scale, rng)?;
        let adam = Adam::new(&net.store, config.lr);
        Ok(Self {
            config: config.clone(),
            net,
            adam,
        })
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Advantages (batch-normalized) and return targets `Â + V_old`.
    pub fn targets(&self, rollout: &Rollout) -> Result<(Vec<f64>, Vec<f64>)> {
        rollout.check()?;
        let adv = gae(
            &rollout.rewards,
            &rollout.values,
            &rollout.dones,
            rollout.bootstrap_value,
            self.config.gamma,
            self.config.zeta,
        )?;
        let returns = adv.iter().zip(&rollout.values).map(|(a, v)| a + v).collect();
        Ok((normalize(&adv), returns))
    }

    /// Several epochs of shuffled minibatch steps against the rollout's
    /// frozen log-probabilities.
    pub fn update<R: Rng + ?Sized>(&mut self, rollout: &Rollout, rng: &mut R) -> Result<PpoDiagnostics> {
        let (adv, returns) = self.targets(rollout)?;
        let n = rollout.len();
        let value_error = rollout
            .values
            .iter()
            .zip(&returns)
            .map(|(v, r)| (v - r).abs())
            .sum::<f64>()
            / n as f64;
        let mb = self.config.minibatch.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut diag = PpoDiagnostics {
            value_error,
            ..PpoDiagnostics::default()
        };
        let mut clipped = 0usize;
        let mut seen = 0usize;
        for epoch in 0..self.config.epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(mb) {
                let batch = LossBatch::select(rollout, &adv, &returns, chunk)?;
                let mut tape = Tape::new();
                let terms = ppo_loss(&mut tape, &self.net, &batch, &self.config)?;
                let total = tape.value(terms.total).item();
                if !total.is_finite() {
                    return Err(Error::NonFinite { what: "policy loss", step: self.adam.steps_taken() });
                }
                for &r in tape.value(terms.ratio).data() {
                    if (r - 1.0).abs() > self.config.clip {
                        clipped += 1;
                    }
                    if epoch == 0 && diag.minibatches == 0 {
                        diag.first_epoch_max_ratio_dev = diag.first_epoch_max_ratio_dev.max((r - 1.0).abs());
                    }
                }
                seen += chunk.len();
                diag.mean_loss += total;
                diag.policy_loss += tape.value(terms.policy).item();
                diag.value_loss += tape.value(terms.value).item();
                tape.backward(terms.total)?;
                self.net.store.zero_grad();
                tape.accumulate_param_grads(&mut self.net.store);
                clip_grad_norm(&mut self.net.store, self.config.max_grad_norm);
                self.adam.step(&mut self.net.store);
                diag.minibatches += 1;
            }
        }
        let m = diag.minibatches as f64;
        diag.mean_loss /= m;
        diag.policy_loss /= m;
        diag.value_loss /= m;
        diag.clip_fraction = clipped as f64 / seen as f64;
        Ok(diag)
    }
}
