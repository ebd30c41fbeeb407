//! Alternating policy/refiner optimization: episodes are collected into a
//! buffer, the policy is updated on it, the refiner on the same transitions,
//! and the buffer is cleared.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelParams};
use crate::config::RunConfig;
use crate::diffusion::{decode, RefinementRecord, Refiner, RefinerUpdate};
use crate::env::{encode_state, EnvConfig, Environment, RankVector};
use crate::error::{Error, Result};
use crate::numerics::Checkpoint;
use crate::ppo::{PpoAgent, PpoDiagnostics, Rollout};

pub const METRICS_SCHEMA: &str = "rank-policy-metrics";
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Coarse policy only; its action is floored directly.
    PpoOnly,
    /// Refiner conditioned on a uniformly random coarse action.
    DdimOnly,
    PpoDdim,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PpoOnly => "ppo_only",
            Mode::DdimOnly => "ddim_only",
            Mode::PpoDdim => "ppo_ddim",
        }
    }

    pub fn uses_policy(self) -> bool {
        !matches!(self, Mode::DdimOnly)
    }

    pub fn uses_refiner(self) -> bool {
        !matches!(self, Mode::PpoOnly)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo_only" | "ppo-only" | "ppo" => Ok(Mode::PpoOnly),
            "ddim_only" | "ddim-only" | "ddim" => Ok(Mode::DdimOnly),
            "ppo_ddim" | "ppo-ddim" | "ppo+ddim" => Ok(Mode::PpoDdim),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected ppo_only, ddim_only or ppo_ddim)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub step_budget: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub patience: usize,
    pub early_stop: bool,
    pub seed: u64,
    /// Moving-average window for the per-step reward trace.
    pub moving_average: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PpoDdim,
            step_budget: 15_000,
            eval_interval: 100,
            eval_episodes: 1,
            patience: 5,
            early_stop: true,
            seed: 42,
            moving_average: 100,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str, reason: &str| Err(Error::config(format!("trainer.{name}"), reason));
        if self.step_budget == 0 {
            return f("step_budget", "must be at least 1");
        }
        if self.eval_interval == 0 {
            return f("eval_interval", "must be at least 1");
        }
        if self.eval_episodes == 0 {
            return f("eval_episodes", "must be at least 1");
        }
        if self.patience == 0 {
            return f("patience", "must be at least 1");
        }
        if self.moving_average == 0 {
            return f("moving_average", "must be at least 1");
        }
        Ok(())
    }
}

/// Halt once the evaluation reward exceeds `min(−λ, −0.5)` and has not
/// improved for `patience` consecutive evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopRule {
    pub threshold: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopRule {
    pub fn threshold_for(lambda: f64) -> f64 {
        (-lambda).min(-0.5)
    }

    pub fn new(lambda: f64, patience: usize) -> Self {
        Self {
            threshold: Self::threshold_for(lambda),
            patience: patience.max(1),
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn stale(&self) -> usize {
        self.stale
    }

    /// Records one evaluation; returns whether training should stop.
    pub fn observe(&mut self, reward: f64) -> bool {
        if reward > self.best {
            self.best = reward;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        reward > self.threshold && self.stale >= self.patience
    }
}

/// Everything stored for one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub coarse: Vec<f64>,
    pub refined: Vec<u32>,
    pub deployed: RankVector,
    pub reward: f64,
    pub task_loss: f64,
    pub comm_cost: f64,
    pub transmit_time: f64,
    pub capacity_bps: f64,
    pub projected: bool,
    pub next_state: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub done: bool,
}

/// Decision produced for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub coarse: Vec<f64>,
    pub refined: Vec<u32>,
    pub log_prob: f64,
    pub value: f64,
}

/// Policy, optional refiner and the mode that wires them together.
#[derive(Debug, Clone)]
pub struct PolicyStack {
    pub mode: Mode,
    pub agent: PpoAgent,
    pub refiner: Option<Refiner>,
    r_max: u32,
}

impl PolicyStack {
    pub fn new(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let env = &config.env;
        // Centre and half-width of the decoding box [0, r_max + 1].
        let half = (env.r_max as f64 + 1.0) / 2.0;
        let agent = PpoAgent::new(env.state_dim(), env.action_dim(), &config.ppo, half, half, rng)?;
        let refiner = if config.trainer.mode.uses_refiner() {
            Some(Refiner::new(&config.diffusion, env.action_dim(), env.r_max, rng)?)
        } else {
            None
        };
        Ok(Self {
            mode: config.trainer.mode,
            agent,
            refiner,
            r_max: env.r_max,
        })
    }

    pub fn r_max(&self) -> u32 {
        self.r_max
    }

    /// With `explore` the coarse action is sampled from the policy;
    /// otherwise the policy mean is used.
    pub fn decide<R: Rng + ?Sized>(&self, state: &[f64], explore: bool, rng: &mut R) -> Result<Decision> {
        let (coarse, log_prob) = match self.mode {
            Mode::DdimOnly => {
                let hi = self.r_max as f64 + 1.0;
                let a = (0..self.agent.net.action_dim()).map(|_| rng.random_range(0.0..hi)).collect();
                (a, 0.0)
            }
            _ if explore => self.agent.net.act(state, rng)?,
            _ => (self.agent.net.mean(state)?, 0.0),
        };
        let value = if self.mode.uses_policy() {
            self.agent.net.value(state)?
        } else {
            0.0
        };
        let refined = match &self.refiner {
            Some(r) => r.refine(&coarse, rng)?,
            None => decode(&coarse, self.r_max),
        };
        Ok(Decision {
            coarse,
            refined,
            log_prob,
            value,
        })
    }

    pub fn checkpoint(&self, meta: &[(&str, String)]) -> Checkpoint {
        let mut c = Checkpoint::new().with_meta("mode", self.mode.name());
        for (k, v) in meta {
            c = c.with_meta(*k, v);
        }
        self.agent.net.save_into(&mut c);
        if let Some(r) = &self.refiner {
            r.save_into(&mut c);
        }
        c
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if let Some(m) = ckpt.meta.get("mode") {
            if m != self.mode.name() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint mode `{m}` does not match configured mode `{}`",
                    self.mode.name()
                )));
            }
        }
        self.agent.net.load_from(ckpt)?;
        if let Some(r) = &mut self.refiner {
            r.load_from(ckpt)?;
        }
        Ok(())
    }
}

fn refined_action(refined: &[u32]) -> Vec<f64> {
    refined.iter().map(|&r| r as f64).collect()
}

/// Runs up to `max_steps` (at most one horizon) steps from a fresh reset.
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut Environment,
    stack: &PolicyStack,
    explore: bool,
    max_steps: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let mut state = encode_state(&env.reset());
    let mut out = Vec::with_capacity(env.config().horizon);
    for _ in 0..max_steps.min(env.config().horizon) {
        let d = stack.decide(&state, explore, rng)?;
        let step = env.step(&refined_action(&d.refined))?;
        let next = encode_state(&step.next_state);
        out.push(Transition {
            state: std::mem::replace(&mut state, next.clone()),
            coarse: d.coarse,
            refined: d.refined,
            deployed: step.deployed,
            reward: step.reward,
            task_loss: step.task_loss,
            comm_cost: step.comm_cost,
            transmit_time: step.transmit_time,
            capacity_bps: step.capacity_bps,
            projected: step.projected,
            next_state: next,
            log_prob: d.log_prob,
            value: d.value,
            done: step.done,
        });
        if step.done {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_reward: f64,
    pub mean_task_loss: f64,
    pub mean_comm_cost: f64,
    pub mean_transmit_time: f64,
    pub max_transmit_time: f64,
    pub mean_rank: f64,
    pub steps: usize,
}

fn eval_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (0xE7A1_0000 + episode as u64)
}

/// Deterministic evaluation: policy mean, refiner with its configured
/// sampler, fresh environments seeded from `seed`. Also returns the
/// deployed rank vectors.
pub fn evaluate_detailed(
    stack: &PolicyStack,
    env_config: &EnvConfig,
    channel: &ChannelParams,
    n_episodes: usize,
    seed: u64,
) -> Result<(EvalSummary, Vec<RankVector>)> {
    if n_episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let mut s = EvalSummary::default();
    let mut deployed = Vec::new();
    for ep in 0..n_episodes {
        let es = eval_seed(seed, ep);
        let mut env = Environment::new(env_config, channel, es)?;
        let mut rng = ChaCha8Rng::seed_from_u64(es ^ 0xA11CE);
        let horizon = env_config.horizon;
        for t in run_episode(&mut env, stack, false, horizon, &mut rng)? {
            s.mean_reward += t.reward;
            s.mean_task_loss += t.task_loss;
            s.mean_comm_cost += t.comm_cost;
            s.mean_transmit_time += t.transmit_time;
            s.max_transmit_time = s.max_transmit_time.max(t.transmit_time);
            s.mean_rank += t.deployed.total_rank() as f64 / t.deployed.len() as f64;
            s.steps += 1;
            deployed.push(t.deployed);
        }
    }
    let n = s.steps as f64;
    s.mean_reward /= n;
    s.mean_task_loss /= n;
    s.mean_comm_cost /= n;
    s.mean_transmit_time /= n;
    s.mean_rank /= n;
    Ok((s, deployed))
}

pub fn evaluate(
    stack: &PolicyStack,
    env_config: &EnvConfig,
    channel: &ChannelParams,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    evaluate_detailed(stack, env_config, channel, n_episodes, seed).map(|(s, _)| s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub episode: u64,
    pub reward: f64,
    pub task_loss: f64,
    pub comm_cost: f64,
    pub transmit_time: f64,
    pub capacity_bps: f64,
    pub mean_rank: f64,
    pub projected: bool,
    pub reward_ma: f64,
    /// Deployment met `Σ T ≤ T_max` by an independent transmit-time check.
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_task_loss: f64,
    pub mean_comm_cost: f64,
    pub mean_transmit_time: f64,
    pub mean_rank: f64,
    pub best_reward: f64,
    pub stale: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub episode: u64,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppo: Option<PpoDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refiner_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refiner_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub rollout_s: f64,
    pub policy_update_s: f64,
    pub refiner_update_s: f64,
    pub eval_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub updates: Vec<UpdateRecord>,
    pub steps_run: u64,
    pub episodes: u64,
    pub stopped_early: bool,
    pub threshold: f64,
    pub timings: Timings,
}

impl RunMetrics {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Mean evaluation reward over all evaluations (area under the curve
    /// per evaluation).
    pub fn reward_auc(&self) -> f64 {
        if self.evals.is_empty() {
            return f64::NAN;
        }
        self.evals.iter().map(|e| e.mean_reward).sum::<f64>() / self.evals.len() as f64
    }

    pub fn budget_violations(&self) -> usize {
        self.steps.iter().filter(|s| !s.within_budget).count()
    }
}

/// Output files of one run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn steps(&self) -> PathBuf {
        self.dir.join("steps.jsonl")
    }
    pub fn evals(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }
    pub fn updates(&self) -> PathBuf {
        self.dir.join("updates.jsonl")
    }
    pub fn timings(&self) -> PathBuf {
        self.dir.join("timings.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.dir.join("resolved_config.toml")
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("latest.ckpt")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("best.ckpt")
    }
}

struct Sinks {
    files: RunFiles,
    steps: BufWriter<File>,
    updates: BufWriter<File>,
    evals: csv::Writer<File>,
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

impl Sinks {
    fn open(dir: &Path, config: &RunConfig, resume: bool) -> Result<Self> {
        let files = RunFiles { dir: dir.to_path_buf() };
        fs::create_dir_all(files.checkpoint_dir()).map_err(|e| Error::io(files.checkpoint_dir(), e))?;
        let open = |p: PathBuf| -> Result<File> {
            if resume {
                fs::OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(&p)
                    .map_err(|e| Error::io(p, e))
            } else {
                create(&p)
            }
        };
        let existing_eval = resume && files.evals().exists();
        let mut steps = BufWriter::new(open(files.steps())?);
        let updates = BufWriter::new(open(files.updates())?);
        let evals = csv::WriterBuilder::new()
            .has_headers(!existing_eval)
            .from_writer(open(files.evals())?);
        if !resume {
            let header = serde_json::json!({
                "schema": METRICS_SCHEMA,
                "version": METRICS_SCHEMA_VERSION,
                "mode": config.trainer.mode.name(),
                "seed": config.trainer.seed,
            });
            writeln!(steps, "{header}").map_err(|e| Error::io(files.steps(), e))?;
        }
        config.save(&files.resolved_config())?;
        Ok(Self {
            files,
            steps,
            updates,
            evals,
        })
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.steps, "{line}").map_err(|e| Error::io(self.files.steps(), e))
    }

    fn update(&mut self, r: &UpdateRecord) -> Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(self.updates, "{line}").map_err(|e| Error::io(self.files.updates(), e))
    }

    fn eval(&mut self, r: &EvalRecord) -> Result<()> {
        self.evals.serialize(r)?;
        self.evals.flush().map_err(|e| Error::io(self.files.evals(), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush().map_err(|e| Error::io(self.files.steps(), e))?;
        self.updates.flush().map_err(|e| Error::io(self.files.updates(), e))
    }
}

/// Where to write artifacts and whether to pick up a previous run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub output_dir: Option<PathBuf>,
    pub resume: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Summary<'a> {
    schema: &'static str,
    version: u32,
    mode: &'static str,
    seed: u64,
    steps_run: u64,
    episodes: u64,
    stopped_early: bool,
    threshold: f64,
    reward_auc: f64,
    budget_violations: usize,
    final_eval: Option<&'a EvalRecord>,
}

/// Trains the configured policy stack and returns its metrics. With an
/// output directory, metrics, checkpoints and the resolved config are
/// written there.
pub fn train(config: &RunConfig, options: &TrainOptions) -> Result<(RunMetrics, PolicyStack)> {
    config.validate()?;
    let tc = &config.trainer;
    let started = Instant::now();
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut stack = PolicyStack::new(config, &mut init_rng)?;
    let mut env = Environment::new(&config.env, &config.channel, tc.seed.wrapping_add(1))?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(2));
    let mut update_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(3));
    let eval_base = tc.seed.wrapping_add(4);

    let mut sinks = match &options.output_dir {
        Some(d) => Some(Sinks::open(d, config, options.resume)?),
        None => None,
    };

    let mut metrics = RunMetrics {
        steps: Vec::new(),
        evals: Vec::new(),
        updates: Vec::new(),
        steps_run: 0,
        episodes: 0,
        stopped_early: false,
        threshold: EarlyStopRule::threshold_for(config.env.lambda),
        timings: Timings::default(),
    };
    if options.resume {
        let files = sinks
            .as_ref()
            .map(|s| s.files.clone())
            .ok_or_else(|| Error::invalid("resume needs an output directory"))?;
        let ckpt = Checkpoint::load(&files.checkpoint())?;
        stack.restore(&ckpt)?;
        let get = |k: &str| -> Result<u64> {
            ckpt.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{k}`")))
        };
        metrics.steps_run = get("steps")?;
        metrics.episodes = get("episodes")?;
    }

    let mut rule = EarlyStopRule::new(config.env.lambda, tc.patience);
    let mut next_eval = (metrics.steps_run / tc.eval_interval + 1) * tc.eval_interval;
    let window = tc.moving_average;
    let mut recent: std::collections::VecDeque<f64> = std::collections::VecDeque::with_capacity(window);
    let mut recent_sum = 0.0;

    let save = |stack: &PolicyStack, sinks: &Option<Sinks>, m: &RunMetrics, path: fn(&RunFiles) -> PathBuf| -> Result<()> {
        if let Some(s) = sinks {
            stack
                .checkpoint(&[
                    ("steps", m.steps_run.to_string()),
                    ("episodes", m.episodes.to_string()),
                    ("seed", tc.seed.to_string()),
                ])
                .save(&path(&s.files))?;
        }
        Ok(())
    };

    if !options.resume {
        // An abort before the first evaluation still leaves a usable checkpoint.
        save(&stack, &sinks, &metrics, RunFiles::checkpoint)?;
    }

    let result: Result<()> = (|| {
        while metrics.steps_run < tc.step_budget {
            let t0 = Instant::now();
            let remaining = (tc.step_budget - metrics.steps_run) as usize;
            let episode = run_episode(&mut env, &stack, true, remaining, &mut act_rng)?;
            metrics.timings.rollout_s += t0.elapsed().as_secs_f64();
            metrics.episodes += 1;

            for t in &episode {
                metrics.steps_run += 1;
                if !t.reward.is_finite() {
                    return Err(Error::NonFinite { what: "reward", step: metrics.steps_run });
                }
                if recent.len() == window {
                    recent_sum -= recent.pop_front().unwrap_or(0.0);
                }
                recent.push_back(t.reward);
                recent_sum += t.reward;
                let independent = channel::transmit_time(
                    &t.deployed,
                    config.env.hidden_dim,
                    config.channel.bits_per_parameter,
                    t.capacity_bps,
                )?
                .total;
                let rec = StepRecord {
                    step: metrics.steps_run,
                    episode: metrics.episodes,
                    reward: t.reward,
                    task_loss: t.task_loss,
                    comm_cost: t.comm_cost,
                    transmit_time: t.transmit_time,
                    capacity_bps: t.capacity_bps,
                    mean_rank: t.deployed.total_rank() as f64 / t.deployed.len() as f64,
                    projected: t.projected,
                    reward_ma: recent_sum / recent.len() as f64,
                    within_budget: independent <= config.env.t_max,
                };
                if let Some(s) = &mut sinks {
                    s.step(&rec)?;
                }
                metrics.steps.push(rec);
            }

            let mut update = UpdateRecord {
                episode: metrics.episodes,
                step: metrics.steps_run,
                ppo: None,
                refiner_loss: None,
                refiner_grad_norm: None,
            };
            if stack.mode.uses_policy() {
                let t0 = Instant::now();
                let last = episode.last().expect("episodes are nonempty");
                let bootstrap = if last.done { 0.0 } else { stack.agent.net.value(&last.next_state)? };
                let rollout = Rollout {
                    states: episode.iter().map(|t| t.state.clone()).collect(),
                    actions: episode.iter().map(|t| t.coarse.clone()).collect(),
                    log_probs: episode.iter().map(|t| t.log_prob).collect(),
                    values: episode.iter().map(|t| t.value).collect(),
                    rewards: episode.iter().map(|t| t.reward).collect(),
                    dones: episode.iter().map(|t| t.done).collect(),
                    bootstrap_value: bootstrap,
                };
                update.ppo = Some(stack.agent.update(&rollout, &mut update_rng)?);
                metrics.timings.policy_update_s += t0.elapsed().as_secs_f64();
            }
            if let Some(refiner) = &mut stack.refiner {
                let t0 = Instant::now();
                // Only this episode's pairs; nothing stale carries over.
                let records: Vec<RefinementRecord> = episode
                    .iter()
                    .map(|t| RefinementRecord {
                        coarse: t.coarse.clone(),
                        refined: t.refined.clone(),
                        reward: t.reward,
                    })
                    .collect();
                let RefinerUpdate { mean_loss, grad_norm, .. } = refiner.update(&records, &mut update_rng)?;
                update.refiner_loss = Some(mean_loss);
                update.refiner_grad_norm = Some(grad_norm);
                metrics.timings.refiner_update_s += t0.elapsed().as_secs_f64();
            }
            if let Some(s) = &mut sinks {
                s.update(&update)?;
            }
            metrics.updates.push(update);

            let mut stop = false;
            if metrics.steps_run >= next_eval || metrics.steps_run >= tc.step_budget {
                while next_eval <= metrics.steps_run {
                    next_eval += tc.eval_interval;
                }
                let t0 = Instant::now();
                let e = evaluate(&stack, &config.env, &config.channel, tc.eval_episodes, eval_base)?;
                metrics.timings.eval_s += t0.elapsed().as_secs_f64();
                if !e.mean_reward.is_finite() {
                    return Err(Error::NonFinite { what: "evaluation reward", step: metrics.steps_run });
                }
                let improved = e.mean_reward > rule.best();
                let fire = rule.observe(e.mean_reward);
                let rec = EvalRecord {
                    step: metrics.steps_run,
                    mean_reward: e.mean_reward,
                    mean_task_loss: e.mean_task_loss,
                    mean_comm_cost: e.mean_comm_cost,
                    mean_transmit_time: e.mean_transmit_time,
                    mean_rank: e.mean_rank,
                    best_reward: rule.best(),
                    stale: rule.stale(),
                };
                if let Some(s) = &mut sinks {
                    s.eval(&rec)?;
                    s.flush()?;
                }
                metrics.evals.push(rec);
                save(&stack, &sinks, &metrics, RunFiles::checkpoint)?;
                if improved {
                    save(&stack, &sinks, &metrics, RunFiles::best_checkpoint)?;
                }
                stop = tc.early_stop && fire;
            }
            if stop {
                metrics.stopped_early = true;
                break;
            }
        }
        Ok(())
    })();

    metrics.timings.total_s = started.elapsed().as_secs_f64();
    if let Some(s) = &mut sinks {
        s.flush()?;
        write_json(&s.files.timings(), &metrics.timings)?;
    }
    if let Err(e) = result {
        let hint = sinks
            .as_ref()
            .map(|s| format!("; last good checkpoint: {}", s.files.checkpoint().display()))
            .unwrap_or_default();
        return Err(match e {
            Error::NonFinite { what, step } => Error::invalid(format!(
                "training aborted: non-finite {what} at step {step}{hint}"
            )),
            other => other,
        });
    }
    if let Some(s) = &sinks {
        let summary = Summary {
            schema: METRICS_SCHEMA,
            version: METRICS_SCHEMA_VERSION,
            mode: stack.mode.name(),
            seed: tc.seed,
            steps_run: metrics.steps_run,
            episodes: metrics.episodes,
            stopped_early: metrics.stopped_early,
            threshold: metrics.threshold,
            reward_auc: metrics.reward_auc(),
            budget_violations: metrics.budget_violations(),
            final_eval: metrics.final_eval(),
        };
        write_json(&s.files.summary(), &summary)?;
    }
    Ok((metrics, stack))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        assert_eq!(EarlyStopRule::threshold_for(1.0), -1.0);
        assert_eq!(EarlyStopRule::threshold_for(0.01), -0.5);
    }

    #[test]
    fn rule_needs_both_conditions() {
        // Above threshold but improving every time: never fires.
        let mut r = EarlyStopRule::new(0.1, 2);
        assert!(!r.observe(-0.4));
        assert!(!r.observe(-0.3));
        assert!(!r.observe(-0.2));
        // Stalls below the threshold: never fires.
        let mut r = EarlyStopRule::new(0.1, 2);
        for _ in 0..10 {
            assert!(!r.observe(-0.9));
        }
        // Stalls above the threshold: fires once patience runs out.
        let mut r = EarlyStopRule::new(0.1, 2);
        assert!(!r.observe(-0.2));
        assert!(!r.observe(-0.25));
        assert!(r.observe(-0.3));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ppo+ddim".parse::<Mode>().unwrap(), Mode::PpoDdim);
        assert!("sac".parse::<Mode>().is_err());
    }
}
