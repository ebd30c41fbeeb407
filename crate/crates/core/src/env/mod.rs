//! The rank-allocation MDP: state assembly, action deployment through the
//! loss oracle and the channel cost model, rewards and episode dynamics.

mod oracle;
mod ranks;
mod surrogate;

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use oracle::{
    serve as serve_oracle, OracleCommand, OracleRequest, OracleResponse, SubprocessOracle, ORACLE_PROTOCOL_VERSION,
};
pub use ranks::{index_of, ModuleKind, RankVector, MODULES_PER_LAYER};
pub use surrogate::{ImportanceProfile, LossOracle, SurrogateLossModel, SurrogateParams};

use crate::channel::{self, ChannelParams, ChannelRealization};
use crate::corpus::{ComplexityStats, CorpusSamples, SyntheticCorpus};
use crate::diffusion::decode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRanks {
    /// Every adapter at `r_max / 2`.
    Half,
    Zero,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Deploy as decoded; a blown latency budget only shows up as `η > 1`.
    Soft,
    /// Greedily shrink ranks until the latency budget holds.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(SyntheticCorpus),
    /// One sample per line, vocabulary one token per line.
    Files { corpus: PathBuf, vocab: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SyntheticCorpus::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub r_max: u32,
    pub t_max: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub init: InitRanks,
    pub projection: Projection,
    /// Lowest rank a deployed adapter may take (0 lets a module be skipped).
    pub rank_floor: u32,
    pub surrogate: SurrogateParams,
    pub corpus: CorpusSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleCommand>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            layers: 24,
            hidden_dim: 2048,
            r_max: 8,
            t_max: 1.0,
            lambda: 0.1,
            horizon: 32,
            init: InitRanks::Half,
            projection: Projection::Soft,
            rank_floor: 0,
            surrogate: SurrogateParams::default(),
            corpus: CorpusSource::default(),
            oracle: None,
        }
    }
}

impl EnvConfig {
    pub fn action_dim(&self) -> usize {
        MODULES_PER_LAYER * self.layers
    }

    pub fn state_dim(&self) -> usize {
        4 + self.action_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("env.layers", "must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("env.hidden_dim", "must be at least 1"));
        }
        if self.r_max == 0 {
            return Err(Error::config("env.r_max", "must be at least 1"));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::config("env.t_max", "must be positive and finite"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("env.lambda", "must be non-negative and finite"));
        }
        if self.horizon == 0 {
            return Err(Error::config("env.horizon", "must be at least 1"));
        }
        if self.rank_floor > self.r_max {
            return Err(Error::config("env.rank_floor", "must not exceed r_max"));
        }
        self.surrogate.validate()?;
        if let CorpusSource::Synthetic(s) = &self.corpus {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub snr_db: f64,
    pub bandwidth_hz: f64,
    pub entropy_bits: f64,
    pub oov_rate: f64,
    pub vocab_size: usize,
    pub ranks: RankVector,
}

const SNR_DB_LIMIT: f64 = 100.0;

/// `[snr_db/20, W/1e8, H/log₂|V|, ρ, ranks/r_max]`, length `4 + 6L`.
pub fn encode_state(state: &EnvState) -> Vec<f64> {
    let r_max = state.ranks.r_max() as f64;
    let max_entropy = (state.vocab_size.max(2) as f64).log2();
    let mut f = Vec::with_capacity(4 + state.ranks.len());
    f.push(state.snr_db.clamp(-SNR_DB_LIMIT, SNR_DB_LIMIT) / 20.0);
    f.push(state.bandwidth_hz / 1e8);
    f.push(state.entropy_bits / max_entropy);
    f.push(state.oov_rate);
    f.extend(state.ranks.as_slice().iter().map(|&r| r as f64 / r_max));
    f
}

/// Recovers the integer ranks from the rank block of an encoded state.
pub fn decode_rank_features(features: &[f64], r_max: u32) -> Vec<u32> {
    features[4..]
        .iter()
        .map(|&x| (x * r_max as f64).round() as u32)
        .collect()
}

/// Greedily decrements the largest coordinate (lowest index on ties), never
/// below `floor`, until total transmit time fits `t_max` or nothing is left
/// to shrink.
pub fn project_to_budget(
    ranks: &RankVector,
    capacity_bps: f64,
    t_max: f64,
    hidden_dim: usize,
    bits_per_parameter: u32,
    floor: u32,
) -> Result<RankVector> {
    let fits = |r: &RankVector| -> Result<bool> {
        Ok(channel::transmit_time(r, hidden_dim, bits_per_parameter, capacity_bps)?.total <= t_max)
    };
    let mut out = ranks.clone();
    if fits(&out)? {
        return Ok(out);
    }

    let unit = channel::params_per_rank(hidden_dim) as f64 * bits_per_parameter as f64;
    let budget = (t_max * capacity_bps / unit).floor().max(0.0);
    // Bulk phase stops one unit above the analytic budget; the exact phase
    // below settles rounding at the boundary with the real time check.
    let bulk_target = if budget >= u64::MAX as f64 { u64::MAX } else { budget as u64 + 1 };

    let mut heap: BinaryHeap<(u32, Reverse<usize>)> = out
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > floor)
        .map(|(i, &r)| (r, Reverse(i)))
        .collect();
    let mut total = out.total_rank();
    let decrement = |out: &mut RankVector, heap: &mut BinaryHeap<(u32, Reverse<usize>)>| -> bool {
        let Some((r, Reverse(i))) = heap.pop() else {
            return false;
        };
        out.set_raw(i, r - 1);
        if r - 1 > floor {
            heap.push((r - 1, Reverse(i)));
        }
        true
    };
    while total > bulk_target {
        if !decrement(&mut out, &mut heap) {
            return Ok(out);
        }
        total -= 1;
    }
    while !fits(&out)? {
        if !decrement(&mut out, &mut heap) {
            break;
        }
    }
    Ok(out)
}

pub fn initial_ranks(init: InitRanks, r_max: u32, layers: usize) -> RankVector {
    let r = match init {
        InitRanks::Half => r_max / 2,
        InitRanks::Zero => 0,
        InitRanks::Max => r_max,
    };
    RankVector::uniform(r, r_max, layers).expect("r <= r_max")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub deployed: RankVector,
    pub reward: f64,
    pub task_loss: f64,
    pub comm_cost: f64,
    pub transmit_time: f64,
    pub capacity_bps: f64,
    pub projected: bool,
    pub done: bool,
}

enum CorpusSampler {
    Synthetic(SyntheticCorpus),
    Samples(CorpusSamples),
}

impl CorpusSampler {
    fn vocab_size(&self) -> usize {
        match self {
            CorpusSampler::Synthetic(s) => s.vocab_size,
            CorpusSampler::Samples(s) => s.vocab_size,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> ComplexityStats {
        use rand::Rng;
        match self {
            CorpusSampler::Synthetic(s) => s.sample_stats(rng),
            CorpusSampler::Samples(s) => s.samples[rng.random_range(0..s.samples.len())],
        }
    }
}

/// One environment instance. Channel and corpus draws use one seeded
/// stream, loss-oracle noise another, so the exogenous state sequence does
/// not depend on the actions taken.
pub struct Environment {
    config: EnvConfig,
    channel: ChannelParams,
    oracle: Box<dyn LossOracle>,
    corpus: CorpusSampler,
    world_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    realization: ChannelRealization,
    stats: ComplexityStats,
    state: EnvState,
    t: usize,
}

impl Environment {
    pub fn new(config: &EnvConfig, channel: &ChannelParams, seed: u64) -> Result<Self> {
        config.validate()?;
        channel.validate()?;
        let corpus = match &config.corpus {
            CorpusSource::Synthetic(s) => CorpusSampler::Synthetic(*s),
            CorpusSource::Files { corpus, vocab } => {
                CorpusSampler::Samples(CorpusSamples::from_files(corpus, vocab)?)
            }
        };
        let oracle: Box<dyn LossOracle> = match &config.oracle {
            Some(cmd) => Box::new(SubprocessOracle::spawn(cmd)?),
            None => Box::new(SurrogateLossModel::new(
                &config.surrogate,
                config.layers,
                corpus.vocab_size(),
            )),
        };
        Self::with_oracle(config, channel, oracle, corpus, seed)
    }

    /// Environment backed by a caller-supplied loss oracle and synthetic corpus.
    pub fn with_loss_oracle(
        config: &EnvConfig,
        channel: &ChannelParams,
        oracle: Box<dyn LossOracle>,
        seed: u64,
    ) -> Result<Self> {
        let corpus = match &config.corpus {
            CorpusSource::Synthetic(s) => CorpusSampler::Synthetic(*s),
            CorpusSource::Files { corpus, vocab } => {
                CorpusSampler::Samples(CorpusSamples::from_files(corpus, vocab)?)
            }
        };
        Self::with_oracle(config, channel, oracle, corpus, seed)
    }

    fn with_oracle(
        config: &EnvConfig,
        channel: &ChannelParams,
        oracle: Box<dyn LossOracle>,
        corpus: CorpusSampler,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        channel.validate()?;
        let mut world_rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_1055);
        let realization = channel::realize(channel, &mut world_rng);
        let stats = corpus.sample(&mut world_rng);
        let ranks = initial_ranks(config.init, config.r_max, config.layers);
        let state = Self::make_state(&realization, channel, &stats, corpus.vocab_size(), ranks);
        Ok(Self {
            config: config.clone(),
            channel: *channel,
            oracle,
            corpus,
            world_rng,
            noise_rng,
            realization,
            stats,
            state,
            t: 0,
        })
    }

    fn make_state(
        realization: &ChannelRealization,
        channel: &ChannelParams,
        stats: &ComplexityStats,
        vocab_size: usize,
        ranks: RankVector,
    ) -> EnvState {
        EnvState {
            snr_db: realization.snr_db,
            bandwidth_hz: channel.bandwidth_hz,
            entropy_bits: stats.entropy_bits,
            oov_rate: stats.oov_rate,
            vocab_size,
            ranks,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn channel(&self) -> &ChannelParams {
        &self.channel
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn capacity_bps(&self) -> f64 {
        self.realization.capacity_bps
    }

    pub fn stats(&self) -> &ComplexityStats {
        &self.stats
    }

    pub fn steps_in_episode(&self) -> usize {
        self.t
    }

    /// Starts a new episode: fresh channel block and corpus sample, ranks
    /// back at their initial value.
    pub fn reset(&mut self) -> EnvState {
        self.realization = channel::realize(&self.channel, &mut self.world_rng);
        self.stats = self.corpus.sample(&mut self.world_rng);
        let ranks = initial_ranks(self.config.init, self.config.r_max, self.config.layers);
        self.state = Self::make_state(
            &self.realization,
            &self.channel,
            &self.stats,
            self.corpus.vocab_size(),
            ranks,
        );
        self.t = 0;
        self.state.clone()
    }

    /// Decodes a continuous action to ranks (applying the floor and, when
    /// enabled, the latency projection). Returns the ranks and whether the
    /// projection changed them.
    pub fn deployable_ranks(&self, action: &[f64]) -> Result<(RankVector, bool)> {
        if action.len() != self.config.action_dim() {
            return Err(Error::invalid(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.config.action_dim()
            )));
        }
        if let Some(i) = action.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("action[{i}] is not finite")));
        }
        let mut ranks = decode(action, self.config.r_max);
        for r in &mut ranks {
            *r = (*r).max(self.config.rank_floor);
        }
        let ranks = RankVector::new(ranks, self.config.r_max, self.config.layers)?;
        match self.config.projection {
            Projection::Soft => Ok((ranks, false)),
            Projection::Hard => {
                let p = project_to_budget(
                    &ranks,
                    self.realization.capacity_bps,
                    self.config.t_max,
                    self.config.hidden_dim,
                    self.channel.bits_per_parameter,
                    self.config.rank_floor,
                )?;
                let changed = p != ranks;
                Ok((p, changed))
            }
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (ranks, projected) = self.deployable_ranks(action)?;
        let capacity = self.realization.capacity_bps;
        let task_loss = self.oracle.loss(&ranks, &self.stats, &mut self.noise_rng)?;
        let bits = self.channel.bits_per_parameter;
        let eta = channel::comm_cost(&ranks, self.config.hidden_dim, bits, capacity, self.config.t_max)?;
        let time = channel::transmit_time(&ranks, self.config.hidden_dim, bits, capacity)?.total;
        let reward = -task_loss - self.config.lambda * eta;

        self.t += 1;
        let done = self.t >= self.config.horizon;
        self.realization = channel::realize(&self.channel, &mut self.world_rng);
        self.stats = self.corpus.sample(&mut self.world_rng);
        self.state = Self::make_state(
            &self.realization,
            &self.channel,
            &self.stats,
            self.corpus.vocab_size(),
            ranks.clone(),
        );
        Ok(StepOutcome {
            next_state: self.state.clone(),
            deployed: ranks,
            reward,
            task_loss,
            comm_cost: eta,
            transmit_time: time,
            capacity_bps: capacity,
            projected,
            done,
        })
    }
}
