use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rank_policy::config::{RunConfig, OUTPUT_ROOT_ENV};
use rank_policy::corpus::{self, tokenize, Vocabulary};
use rank_policy::diffusion::{NoiseSchedule, ScheduleKind};
use rank_policy::env::{serve_oracle, SurrogateLossModel};
use rank_policy::numerics::Checkpoint;
use rank_policy::report;
use rank_policy::sweep::{self, Axis};
use rank_policy::trainer::{evaluate, train, RunFiles, TrainOptions};

#[derive(Parser)]
#[command(name = "rank-policy", version, about = "Adapter rank allocation over a fading link")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy stack and write metrics, checkpoints and the resolved config.
    Train(TrainArgs),
    /// Evaluate a saved run deterministically and print the summary as JSON.
    Evaluate(EvalArgs),
    /// Train one run per value along a single axis and write a combined CSV.
    Sweep(SweepArgs),
    /// Lexical entropy and out-of-vocabulary rate of a text corpus.
    AnalyzeCorpus(CorpusArgs),
    /// Mean deployed rank per layer and module of a frozen policy, as CSV.
    RankReport(ReportArgs),
    /// Noise schedule table (tau, beta, alpha_bar) as CSV.
    ScheduleDump(ScheduleArgs),
    /// Serve the surrogate loss over the line-delimited JSON oracle protocol on stdin/stdout.
    OracleServe(OracleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `env.lambda=0.1`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Mean SNR in dB.
    #[arg(long)]
    snr: Option<f64>,
    /// ppo_only, ddim_only or ppo_ddim.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Environment step budget.
    #[arg(long)]
    steps: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.apply_overrides(&self.overrides)?;
        if let Some(v) = self.lambda {
            c.env.lambda = v;
        }
        if let Some(db) = self.snr {
            Axis::Snr.apply(&mut c, &db.to_string())?;
        }
        if let Some(m) = &self.mode {
            c.trainer.mode = m.parse()?;
        }
        if let Some(s) = self.seed {
            c.trainer.seed = s;
        }
        if let Some(n) = self.steps {
            c.trainer.step_budget = n;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; defaults to `<output root>/<mode>_seed<seed>`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct RunSource {
    /// Run directory holding `resolved_config.toml` and `checkpoints/`.
    #[arg(long, conflicts_with = "config")]
    run: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    config: Option<PathBuf>,
    /// Checkpoint file; defaults to the run's latest checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the run's best checkpoint instead of the latest.
    #[arg(long, requires = "run")]
    best: bool,
}

impl RunSource {
    fn load(&self) -> Result<(RunConfig, Checkpoint)> {
        let (config, ckpt_path) = match (&self.run, &self.config) {
            (Some(dir), _) => {
                let files = RunFiles { dir: dir.clone() };
                let default = if self.best { files.best_checkpoint() } else { files.checkpoint() };
                (
                    RunConfig::load(&files.resolved_config())?,
                    self.checkpoint.clone().unwrap_or(default),
                )
            }
            (None, Some(cfg)) => (RunConfig::load(cfg)?, self.checkpoint.clone().expect("required by clap")),
            (None, None) => bail!("pass --run DIR or --config FILE --checkpoint FILE"),
        };
        let ckpt = Checkpoint::load(&ckpt_path)?;
        Ok((config, ckpt))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: RunSource,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    /// Evaluation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// snr, lambda, schedule, prediction, tdiff or rmax.
    #[arg(long)]
    axis: String,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    values: Vec<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Sweep directory; defaults to `<output root>/sweep_<axis>`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Concurrent runs (0 uses every core).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Train every grid point with the base seed instead of base + index.
    #[arg(long)]
    shared_seed: bool,
}

#[derive(Args)]
struct CorpusArgs {
    /// Text corpus, one sample per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Reference vocabulary, one token per line.
    #[arg(long)]
    vocab: PathBuf,
    /// Emit one CSV row per nonempty line instead of corpus totals.
    #[arg(long)]
    per_line: bool,
    /// Parallel shards for the corpus totals.
    #[arg(long, default_value_t = 8)]
    shards: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    source: RunSource,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// linear, cosine or scaled_linear.
    #[arg(long, default_value = "linear")]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = a.config.resolve()?;
    let dir = a
        .output
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| output_root().join(format!("{}_seed{}", config.trainer.mode.name(), config.trainer.seed)));
    config.output_dir = Some(dir.clone());
    let opts = TrainOptions { output_dir: Some(dir.clone()), resume: a.resume };
    let (m, _) = train(&config, &opts)?;
    let last = m.final_eval();
    println!(
        "{} steps, {} episodes{}; final reward {}; artifacts in {}",
        m.steps_run,
        m.episodes,
        if m.stopped_early { ", stopped early" } else { "" },
        last.map(|e| format!("{:.4}", e.mean_reward)).unwrap_or_else(|| "n/a".into()),
        dir.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvalArgs) -> Result<()> {
    let (config, ckpt) = a.source.load()?;
    let stack = report::load_stack(&config, &ckpt)?;
    let s = evaluate(&stack, &config.env, &config.channel, a.episodes, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let axis: Axis = a.axis.parse()?;
    let values: Vec<String> = a.values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    let base = a.config.resolve()?;
    let root = a.output.unwrap_or_else(|| output_root().join(format!("sweep_{axis}")));
    let points = sweep::plan(&base, axis, &values, &root, a.shared_seed)?;
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let rows = sweep::run(axis, points, a.workers);
    let summary = root.join("sweep.csv");
    sweep::write_summary(&rows, &summary)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    for r in rows.iter().filter(|r| r.status != "ok") {
        eprintln!("{axis}={}: {}", r.value, r.error);
    }
    println!("{} runs, {failed} failed; summary in {}", rows.len(), summary.display());
    Ok(())
}

fn cmd_analyze_corpus(a: CorpusArgs) -> Result<()> {
    let vocab = Vocabulary::from_file(&a.vocab)?;
    let text = fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let lines: Vec<&str> = text.lines().collect();
    if a.per_line {
        let mut w = csv::Writer::from_writer(io::stdout().lock());
        w.write_record(["line", "entropy_bits", "oov_rate", "token_count"])?;
        for (i, l) in lines.iter().enumerate() {
            let toks = tokenize(l);
            if toks.is_empty() {
                continue;
            }
            let s = corpus::measure(&toks, &vocab)?;
            w.write_record([(i + 1).to_string(), s.entropy_bits.to_string(), s.oov_rate.to_string(), s.token_count.to_string()])?;
        }
        w.flush()?;
    } else {
        let s = corpus::analyze_lines(&lines, &vocab, a.shards)?;
        let out = serde_json::json!({
            "entropy_bits": s.entropy_bits,
            "oov_rate": s.oov_rate,
            "token_count": s.token_count,
            "lines": lines.len(),
            "vocab_size": vocab.size(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    }
    Ok(())
}

fn cmd_rank_report(a: ReportArgs) -> Result<()> {
    let (config, ckpt) = a.source.load()?;
    let stack = report::load_stack(&config, &ckpt).context("checkpoint does not fit the configuration")?;
    let table = report::rank_report(&stack, &config, a.episodes, a.seed)?;
    report::write_rank_table(&table, sink(&a.out)?)?;
    Ok(())
}

fn cmd_schedule_dump(a: ScheduleArgs) -> Result<()> {
    let kind: ScheduleKind = a.kind.parse()?;
    let s = NoiseSchedule::build(kind, a.steps)?;
    s.write_csv(sink(&a.out)?)?;
    Ok(())
}

fn cmd_oracle_serve(a: OracleArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let vocab_size = match &config.env.corpus {
        rank_policy::env::CorpusSource::Synthetic(s) => s.vocabulary().size(),
        rank_policy::env::CorpusSource::Files { vocab, .. } => Vocabulary::from_file(vocab)?.size(),
    };
    let mut model = SurrogateLossModel::new(&config.env.surrogate, config.env.layers, vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
    serve_oracle(io::stdin().lock(), io::stdout().lock(), &mut model, &mut rng)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AnalyzeCorpus(a) => cmd_analyze_corpus(a),
        Command::RankReport(a) => cmd_rank_report(a),
        Command::ScheduleDump(a) => cmd_schedule_dump(a),
        Command::OracleServe(a) => cmd_oracle_serve(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

