use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rank_policy::config::RunConfig;
use rank_policy::corpus::{measure, tokenize, SyntheticCorpus};
use rank_policy::par::{map_parallel, map_sequential};
use rank_policy::trainer::{evaluate, Mode, PolicyStack};

fn corpus_lines(n: usize) -> Vec<String> {
    let corpus = SyntheticCorpus::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n).map(|_| corpus.sample_tokens(64, &mut rng).join(" ")).collect()
}

fn per_line_stats(c: &mut Criterion) {
    let lines = corpus_lines(4000);
    let vocab = SyntheticCorpus::default().vocabulary();
    let stats = |l: &String| measure(&tokenize(l), &vocab).unwrap();
    let mut g = c.benchmark_group("corpus_stats");
    g.bench_function(BenchmarkId::new("sequential", lines.len()), |b| {
        b.iter(|| map_sequential(lines.iter().collect(), stats))
    });
    g.bench_function(BenchmarkId::new("parallel", lines.len()), |b| {
        b.iter(|| map_parallel(lines.iter().collect(), stats))
    });
    g.finish();
}

fn seed_evaluation(c: &mut Criterion) {
    let mut config = RunConfig::default();
    config.trainer.mode = Mode::PpoOnly;
    let stack = PolicyStack::new(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let seeds: Vec<u64> = (0..8).collect();
    let eval = |s: u64| evaluate(&stack, &config.env, &config.channel, 1, s).unwrap().mean_reward;
    let mut g = c.benchmark_group("seed_evaluation");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| map_sequential(seeds.clone(), eval)));
    g.bench_function("parallel", |b| b.iter(|| map_parallel(seeds.clone(), eval)));
    g.finish();
}

criterion_group!(benches, per_line_stats, seed_evaluation);
criterion_main!(benches);
