use proptest::prelude::*;
use rank_policy::channel::{self, ChannelParams};
use rank_policy::corpus::ComplexityStats;
use rank_policy::diffusion::{decode, reward_weights};
use rank_policy::env::{project_to_budget, EnvConfig, Environment, RankVector, SurrogateLossModel, SurrogateParams};
use rank_policy::ppo::gae;

const LAYERS: usize = 3;
const R_MAX: u32 = 16;

fn ranks() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..=R_MAX, 6 * LAYERS)
}

fn rv(r: Vec<u32>) -> RankVector {
    RankVector::new(r, R_MAX, LAYERS).unwrap()
}

proptest! {
    #[test]
    fn comm_cost_is_additive(a in ranks(), b in ranks(), cap in 1e6f64..1e10, t in 0.01f64..10.0) {
        let a: Vec<u32> = a.iter().map(|x| x / 2).collect();
        let b: Vec<u32> = b.iter().map(|x| x / 2).collect();
        let sum: Vec<u32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let eta = |r: Vec<u32>| channel::comm_cost(&rv(r), 2048, 32, cap, t).unwrap();
        let whole = eta(sum);
        let parts = eta(a) + eta(b);
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1e-300));
    }

    #[test]
    fn comm_cost_matches_transmit_time(r in ranks(), cap in 1e6f64..1e10, t in 0.01f64..10.0) {
        let r = rv(r);
        let eta = channel::comm_cost(&r, 2048, 32, cap, t).unwrap();
        let time = channel::transmit_time(&r, 2048, 32, cap).unwrap().total;
        prop_assert!((eta * t - time).abs() <= 1e-12 * time.max(1e-300));
    }

    #[test]
    fn capacity_grows_with_snr(lo in -20.0f64..30.0, gap in 0.01f64..10.0) {
        let c = |db: f64| channel::shannon_capacity(1e8, channel::db_to_linear(db));
        prop_assert!(c(lo + gap) > c(lo));
    }

    #[test]
    fn surrogate_loss_is_monotone(r in ranks(), i in 0..6 * LAYERS, h in 0.0f64..8.0, o in 0.0f64..1.0) {
        let model = SurrogateLossModel::new(&SurrogateParams::default(), LAYERS, 1000);
        let stats = ComplexityStats { entropy_bits: h, oov_rate: o, token_count: 100 };
        let mut up = r.clone();
        up[i] = (up[i] + 1).min(R_MAX);
        let (base, raised) = (model.expected_loss(&rv(r), &stats), model.expected_loss(&rv(up), &stats));
        prop_assert!(raised <= base);
        prop_assert!(raised >= model.base_loss);
    }

    #[test]
    fn decode_is_in_range_and_idempotent(x in prop::collection::vec(-50.0f64..50.0, 1..40), r_max in 1u32..64) {
        let d = decode(&x, r_max);
        prop_assert!(d.iter().all(|&r| r <= r_max));
        let again: Vec<f64> = d.iter().map(|&r| r as f64).collect();
        prop_assert_eq!(decode(&again, r_max), d);
    }

    #[test]
    fn projection_meets_the_budget(r in ranks(), snr in -5.0f64..15.0, t_max in 0.001f64..1.0, floor in 0u32..3) {
        let cap = channel::shannon_capacity(1e8, channel::db_to_linear(snr));
        let r = rv(r);
        let p = project_to_budget(&r, cap, t_max, 2048, 32, floor).unwrap();
        let time = channel::transmit_time(&p, 2048, 32, cap).unwrap().total;
        let all_at_floor = p.as_slice().iter().zip(r.as_slice()).all(|(&q, &o)| q == o.min(floor));
        prop_assert!(time <= t_max || all_at_floor);
        for (&q, &o) in p.as_slice().iter().zip(r.as_slice()) {
            prop_assert!(q <= o);
            prop_assert!(q >= o.min(floor));
        }
    }

    #[test]
    fn reward_weights_average_one(rewards in prop::collection::vec(-5.0f64..1.0, 2..64), kappa in 0.0f64..2.0) {
        let w = reward_weights(&rewards, kappa, 1.0);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        for (i, j) in [(0, 1), (1, 0)] {
            if rewards[i] > rewards[j] {
                prop_assert!(w[i] >= w[j]);
            }
        }
    }

    #[test]
    fn one_step_advantage_is_td_error(
        rv_pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..10),
        boot in -3.0f64..3.0,
        gamma in 0.5f64..0.999,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = rv_pairs.into_iter().unzip();
        let dones = vec![false; r.len()];
        let a = gae(&r, &v, &dones, boot, gamma, 0.0).unwrap();
        for t in 0..r.len() {
            let next = if t + 1 < r.len() { v[t + 1] } else { boot };
            prop_assert!((a[t] - (r[t] + gamma * next - v[t])).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn step_reward_composes(seed in any::<u64>(), lambda in 0.0f64..2.0, action in prop::collection::vec(-2.0f64..12.0, 12)) {
        let config = EnvConfig { layers: 2, lambda, ..EnvConfig::default() };
        let mut env = Environment::new(&config, &ChannelParams::rayleigh_mean_snr_db(5.0, 1e8), seed).unwrap();
        env.reset();
        let s = env.step(&action).unwrap();
        prop_assert_eq!(s.reward, -s.task_loss - lambda * s.comm_cost);
        prop_assert!(s.deployed.as_slice().iter().all(|&r| r <= config.r_max));
    }
}
