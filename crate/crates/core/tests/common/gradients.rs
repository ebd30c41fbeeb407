use super::{max_relative_error, sample_entries, store_finite_difference, store_grads};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rank_policy::diffusion::{
    draw_noise, loss_on_tape, Denoiser, DenoiserShape, NoiseSchedule, PredictionType, ScheduleKind, TrainingExample,
};
use rank_policy::numerics::{Matrix, ParamStore, Tape, Var};
use rank_policy::ppo::{gaussian_log_prob, ppo_loss, ActorCritic, LossBatch, PpoConfig};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
const INSTANCES: u64 = 20;

fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Builds `Σ w ⊙ op(x)` from a store holding `x` (and optionally a second
/// operand), runs backward and compares every entry against differences.
fn check_op(name: &str, seed: u64, lo: f64, hi: f64, op: impl Fn(&mut Tape, &[Var]) -> Var, operands: usize, shape: (usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for i in 0..operands {
        store.add(format!("x{i}"), random_matrix(shape.0, shape.1, lo, hi, &mut rng));
    }
    let eval = |s: &ParamStore, grads: bool| -> (f64, Option<ParamStore>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = s.ids().map(|id| tape.param(s, id)).collect();
        let out = op(&mut tape, &vars);
        let (r, c) = tape.shape(out);
        let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
        let w = tape.constant(random_matrix(r, c, -1.0, 1.0, &mut wr));
        let prod = tape.mul(out, w).unwrap();
        let total = tape.sum(prod);
        let v = tape.value(total).item();
        if !grads {
            return (v, None);
        }
        tape.backward(total).unwrap();
        let mut g = s.clone();
        g.zero_grad();
        tape.accumulate_param_grads(&mut g);
        (v, Some(g))
    };
    let (_, g) = eval(&store, true);
    let entries = sample_entries(&store, usize::MAX);
    let analytic = store_grads(&g.unwrap(), &entries);
    let numeric = store_finite_difference(&store, &entries, H, |s| eval(s, false).0);
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
}

pub fn elementwise_activations() {
    for seed in 0..INSTANCES {
        check_op("tanh", seed, -2.0, 2.0, |t, v| t.tanh(v[0]), 1, (3, 4));
        check_op("sigmoid", seed, -3.0, 3.0, |t, v| t.sigmoid(v[0]), 1, (3, 4));
        check_op("silu", seed, -3.0, 3.0, |t, v| t.silu(v[0]), 1, (3, 4));
        check_op("exp", seed, -1.0, 1.0, |t, v| t.exp(v[0]), 1, (3, 4));
        check_op("square", seed, -2.0, 2.0, |t, v| t.square(v[0]), 1, (3, 4));
        check_op("neg", seed, -2.0, 2.0, |t, v| t.neg(v[0]), 1, (3, 4));
        check_op("scale", seed, -2.0, 2.0, |t, v| t.scale(v[0], -1.7), 1, (3, 4));
        check_op("add_scalar", seed, -2.0, 2.0, |t, v| t.add_scalar(v[0], 0.3), 1, (3, 4));
    }
}

pub fn clamp_away_from_its_corners() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Entries on either side of the clamp band but not within 1e-3 of it.
        let pick = |rng: &mut ChaCha8Rng| -> f64 {
            loop {
                let x: f64 = rng.random_range(-2.0..2.0);
                if (x.abs() - 1.0).abs() > 1e-3 {
                    return x;
                }
            }
        };
        let mut store = ParamStore::new();
        let data = (0..12).map(|_| pick(&mut rng)).collect();
        store.add("x", Matrix::from_vec(3, 4, data).unwrap());
        let eval = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(s, s.ids().next().unwrap());
            let y = tape.clamp(x, -1.0, 1.0);
            let y = tape.square(y);
            let total = tape.sum(y);
            (tape, total)
        };
        let (mut tape, total) = eval(&store);
        tape.backward(total).unwrap();
        let mut g = store.clone();
        g.zero_grad();
        tape.accumulate_param_grads(&mut g);
        let entries = sample_entries(&store, usize::MAX);
        let numeric = store_finite_difference(&store, &entries, H, |s| {
            let (tape, total) = eval(s);
            tape.value(total).item()
        });
        let err = max_relative_error(&store_grads(&g, &entries), &numeric, 1e-6);
        assert!(err < TOL, "clamp seed {seed}: {err:e}");
    }
}

pub fn structural_ops() {
    for seed in 0..INSTANCES {
        check_op("matmul", seed, -1.0, 1.0, |t, v| t.matmul(v[0], v[1]).unwrap(), 2, (4, 4));
        check_op("add", seed, -1.0, 1.0, |t, v| t.add(v[0], v[1]).unwrap(), 2, (3, 5));
        check_op("sub", seed, -1.0, 1.0, |t, v| t.sub(v[0], v[1]).unwrap(), 2, (3, 5));
        check_op("mul", seed, -1.0, 1.0, |t, v| t.mul(v[0], v[1]).unwrap(), 2, (3, 5));
        check_op(
            "sum_cols",
            seed,
            -1.0,
            1.0,
            |t, v| {
                let s = t.sum_cols(v[0]);
                t.square(s)
            },
            1,
            (4, 3),
        );
        check_op(
            "mean",
            seed,
            -1.0,
            1.0,
            |t, v| {
                let m = t.mean(v[0]);
                t.exp(m)
            },
            1,
            (4, 3),
        );
        check_op(
            "concat_cols",
            seed,
            -1.0,
            1.0,
            |t, v| {
                let c = t.concat_cols(&[v[0], v[1]]).unwrap();
                t.tanh(c)
            },
            2,
            (3, 2),
        );
    }
}

pub fn broadcasting_ops() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add("a", random_matrix(4, 3, -1.0, 1.0, &mut rng));
        store.add("row", random_matrix(1, 3, -1.0, 1.0, &mut rng));
        store.add("col", random_matrix(4, 1, -1.0, 1.0, &mut rng));
        store.add("b", random_matrix(4, 3, -1.0, 1.0, &mut rng));
        let build = |s: &ParamStore| {
            let mut tape = Tape::new();
            let ids: Vec<_> = s.ids().collect();
            let a = tape.param(s, ids[0]);
            let row = tape.param(s, ids[1]);
            let col = tape.param(s, ids[2]);
            let b = tape.param(s, ids[3]);
            let x = tape.add_row(a, row).unwrap();
            let x = tape.mul_col(x, col).unwrap();
            let r = tape.broadcast_rows(row, 4).unwrap();
            let x = tape.add(x, r).unwrap();
            let x = tape.minimum(x, b).unwrap();
            let x = tape.tanh(x);
            let total = tape.sum(x);
            (tape, total)
        };
        let (mut tape, total) = build(&store);
        tape.backward(total).unwrap();
        let mut g = store.clone();
        g.zero_grad();
        tape.accumulate_param_grads(&mut g);
        let entries = sample_entries(&store, usize::MAX);
        let numeric = store_finite_difference(&store, &entries, H, |s| {
            let (tape, total) = build(s);
            tape.value(total).item()
        });
        let err = max_relative_error(&store_grads(&g, &entries), &numeric, 1e-6);
        assert!(err < TOL, "broadcast seed {seed}: {err:e}");
    }
}

fn small_policy(seed: u64) -> (ActorCritic, PpoConfig) {
    let config = PpoConfig {
        hidden: 8,
        entropy_coef: 0.01,
        ..PpoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ActorCritic::new(5, 3, &config, 1.0, 2.0, &mut rng).unwrap();
    net.set_log_std(rng.random_range(-0.5..0.5));
    (net, config)
}

/// A minibatch whose probability ratios stay at least `margin` away from
/// the clip boundaries, so the objective is smooth around the parameters.
fn policy_batch(net: &ActorCritic, config: &PpoConfig, seed: u64, margin: f64) -> LossBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let n = 6;
    let states: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for s in &states {
        let mean = net.mean(s).unwrap();
        let a: Vec<f64> = mean.iter().map(|m| m + rng.random_range(-1.0..1.0)).collect();
        let lp = gaussian_log_prob(&a, &mean, net.log_std());
        let shift = loop {
            let d: f64 = rng.random_range(-0.4..0.4);
            let r = (-d).exp();
            if (r - 1.0 - config.clip).abs() > margin && (r - 1.0 + config.clip).abs() > margin {
                break d;
            }
        };
        actions.push(a);
        old.push(lp + shift);
    }
    LossBatch {
        states: Matrix::from_rows(&states).unwrap(),
        actions: Matrix::from_rows(&actions).unwrap(),
        old_log_probs: old,
        advantages: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        returns: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn check_policy_term(seed: u64, pick: fn(&rank_policy::ppo::LossTerms) -> Var) {
    let (net, config) = small_policy(seed);
    let batch = policy_batch(&net, &config, seed, 1e-3);
    let value_of = |store: &ParamStore| {
        let mut n2 = net.clone();
        n2.store = store.clone();
        let mut tape = Tape::new();
        let terms = ppo_loss(&mut tape, &n2, &batch, &config).unwrap();
        tape.value(pick(&terms)).item()
    };
    let mut tape = Tape::new();
    let terms = ppo_loss(&mut tape, &net, &batch, &config).unwrap();
    tape.backward(pick(&terms)).unwrap();
    let mut g = net.store.clone();
    g.zero_grad();
    tape.accumulate_param_grads(&mut g);
    let entries = sample_entries(&net.store, 120);
    let numeric = store_finite_difference(&net.store, &entries, H, value_of);
    let err = max_relative_error(&store_grads(&g, &entries), &numeric, 1e-6);
    assert!(err < TOL, "seed {seed}: relative error {err:e}");
}

pub fn clipped_policy_objective() {
    for seed in 0..INSTANCES {
        check_policy_term(seed, |t| t.policy);
    }
}

pub fn value_regression_loss() {
    for seed in 0..INSTANCES {
        check_policy_term(seed, |t| t.value);
    }
}

pub fn combined_actor_critic_loss() {
    for seed in 0..INSTANCES {
        check_policy_term(seed, |t| t.total);
    }
}

pub fn weighted_denoising_loss() {
    let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
    for seed in 0..INSTANCES {
        let kind = PredictionType::ALL[seed as usize % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Denoiser::new(
            DenoiserShape {
                action_dim: 4,
                hidden: 8,
                embed_dim: 6,
                blocks: 2,
            },
            &mut rng,
        )
        .unwrap();
        let batch: Vec<TrainingExample> = (0..5)
            .map(|_| TrainingExample {
                x0: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                cond: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                reward: rng.random_range(-1.0..0.0),
            })
            .collect();
        let draws = draw_noise(batch.len(), 4, &schedule, 0.4, &mut rng);
        let weights: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(0.5..1.5)).collect();
        let value_of = |store: &ParamStore| {
            let mut n2 = net.clone();
            n2.store = store.clone();
            let mut tape = Tape::new();
            let l = loss_on_tape(&mut tape, &n2, kind, &schedule, &batch, &draws, &weights).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let l = loss_on_tape(&mut tape, &net, kind, &schedule, &batch, &draws, &weights).unwrap();
        tape.backward(l).unwrap();
        let mut g = net.store.clone();
        g.zero_grad();
        tape.accumulate_param_grads(&mut g);
        let entries = sample_entries(&net.store, 150);
        let numeric = store_finite_difference(&net.store, &entries, H, value_of);
        let err = max_relative_error(&store_grads(&g, &entries), &numeric, 1e-6);
        assert!(err < TOL, "seed {seed} ({kind:?}): relative error {err:e}");
    }
}
