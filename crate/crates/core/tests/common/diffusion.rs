use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rank_policy::diffusion::{
    convert, ddim_step, decode, forward_sample, posterior_mean, sample_with, target, timesteps, DiffusionConfig,
    NoiseSchedule, PredictionType, RefinementRecord, Refiner, ScheduleKind, DenoiserInput,
};

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn true_eps(x: &[f64], x0: &[f64], alpha_bar: f64) -> Vec<f64> {
    x.iter()
        .zip(x0)
        .map(|(x, x0)| (x - alpha_bar.sqrt() * x0) / (1.0 - alpha_bar).sqrt())
        .collect()
}

pub fn forward_noise_variance_matches_schedule() {
    let schedule = NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for tau in [1, 250, 999] {
        let ab = schedule.alpha_bar(tau);
        let x0 = [0.7];
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let eps = gaussian(1, &mut rng);
            let r = forward_sample(&x0, tau, &schedule, &eps).unwrap()[0] - ab.sqrt() * x0[0];
            sum += r;
            sq += r * r;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.02, "tau {tau}: var {var}, expected {}", 1.0 - ab);
    }
}

pub fn perfect_denoiser_step_lands_on_forward_marginal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in ScheduleKind::ALL {
        let schedule = NoiseSchedule::build(kind, 1000).unwrap();
        let x0 = gaussian(6, &mut rng);
        let eps = gaussian(6, &mut rng);
        let x = forward_sample(&x0, 700, &schedule, &eps).unwrap();
        let next = ddim_step(&x, 700, 640, &eps, &x0, 0.0, &schedule, &mut rng).unwrap();
        let expect = forward_sample(&x0, 640, &schedule, &eps).unwrap();
        for (a, b) in next.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

pub fn perfect_denoiser_chain_reconstructs_clean_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in ScheduleKind::ALL {
        let schedule = NoiseSchedule::build(kind, 1000).unwrap();
        for steps in [1000, 50] {
            let x0 = gaussian(12, &mut rng);
            let init = gaussian(12, &mut rng);
            let out = sample_with(&schedule, steps, 0.0, None, init, &mut rng, |x, tau| {
                Ok(true_eps(x, &x0, schedule.alpha_bar(tau)))
            })
            .unwrap();
            let err = out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{kind} with {steps} steps: error {err:e}");
        }
    }
}

pub fn parameterizations_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in ScheduleKind::ALL {
        for t in [600, 800, 1000] {
            let schedule = NoiseSchedule::build(kind, t).unwrap();
            for _ in 0..50 {
                let tau = rng.random_range(1..=t);
                let ab = schedule.alpha_bar(tau);
                let x0 = gaussian(8, &mut rng);
                let eps = gaussian(8, &mut rng);
                let x = forward_sample(&x0, tau, &schedule, &eps).unwrap();
                for p in PredictionType::ALL {
                    let (e, c) = convert(&target(p, &x0, &eps, ab), p, &x, ab).unwrap();
                    for i in 0..8 {
                        assert!((e[i] - eps[i]).abs() < 1e-9, "{p:?} eps at tau {tau}");
                        assert!((c[i] - x0[i]).abs() < 1e-9, "{p:?} x0 at tau {tau}");
                    }
                }
            }
        }
    }
}

pub fn posterior_mean_matches_clean_sample_form() {
    // Ancestral posterior mean written through (x0, x_τ) instead of ε.
    let schedule = NoiseSchedule::build(ScheduleKind::ScaledLinear, 800).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for tau in [2, 100, 799] {
        let (ab, ab_prev) = (schedule.alpha_bar(tau), schedule.alpha_bar(tau - 1));
        let (a, b) = (schedule.alpha(tau), schedule.beta(tau));
        let x0 = gaussian(5, &mut rng);
        let eps = gaussian(5, &mut rng);
        let x = forward_sample(&x0, tau, &schedule, &eps).unwrap();
        let got = posterior_mean(&x, tau, &eps, &schedule).unwrap();
        for i in 0..5 {
            let expect = ab_prev.sqrt() * b / (1.0 - ab) * x0[i] + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * x[i];
            assert!((got[i] - expect).abs() < 1e-9);
        }
    }
}

pub fn single_step_sampling_returns_clean_estimate() {
    let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 600).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = gaussian(4, &mut rng);
    let eps_hat = gaussian(4, &mut rng);
    let ab = schedule.alpha_bar(600);
    let expect: Vec<f64> = init
        .iter()
        .zip(&eps_hat)
        .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
        .collect();
    let out = sample_with(&schedule, 1, 0.0, None, init, &mut rng, |_, _| Ok(eps_hat.clone())).unwrap();
    for (a, b) in out.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
    }
}

pub fn timestep_subsequence_is_strictly_decreasing() {
    for (t, n) in [(1000, 50), (1000, 1), (600, 600), (800, 30), (7, 3)] {
        let taus = timesteps(t, n).unwrap();
        assert_eq!(taus.len(), n);
        assert_eq!(taus[0], t);
        assert!(taus.windows(2).all(|w| w[0] > w[1]));
        assert!(*taus.last().unwrap() >= 1);
    }
    assert!(timesteps(10, 11).is_err());
    assert!(timesteps(10, 0).is_err());
}

fn tiny_config() -> DiffusionConfig {
    DiffusionConfig {
        train_steps: 100,
        inference_steps: 10,
        hidden: 16,
        embed_dim: 8,
        samples_per_episode: 64,
        lr: 3e-3,
        ..DiffusionConfig::default()
    }
}

pub fn deterministic_sampling_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let refiner = Refiner::new(&tiny_config(), 6, 8, &mut rng).unwrap();
    let coarse = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let a = refiner.sample(&coarse, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let b = refiner.sample(&coarse, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let c = refiner.sample(&coarse, &mut ChaCha8Rng::seed_from_u64(78)).unwrap();
    assert_ne!(a, c);
}

pub fn trained_condition_changes_the_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut refiner = Refiner::new(&tiny_config(), 4, 8, &mut rng).unwrap();
    // Refined ranks copy the coarse action, so the condition is informative.
    let records: Vec<RefinementRecord> = (0..64)
        .map(|i| {
            let r = (i % 9) as u32;
            RefinementRecord {
                coarse: vec![r as f64 + 0.5; 4],
                refined: vec![r; 4],
                reward: -1.0,
            }
        })
        .collect();
    for _ in 0..30 {
        refiner.update(&records, &mut rng).unwrap();
    }
    let x = gaussian(4, &mut rng);
    let cond = [0.9; 4];
    let out = refiner
        .denoiser()
        .predict(&[
            DenoiserInput { x_tau: &x, tau: 50, cond: Some(&cond) },
            DenoiserInput { x_tau: &x, tau: 50, cond: None },
        ])
        .unwrap();
    assert_ne!(out.row(0), out.row(1));
}

pub fn decoded_ranks_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-50.0..50.0)).collect();
        let r = decode(&x, 8);
        assert!(r.iter().all(|&v| v <= 8));
        let again: Vec<f64> = r.iter().map(|&v| v as f64).collect();
        assert_eq!(decode(&again, 8), r);
    }
}

pub fn alpha_bar_strictly_decreases() {
    for kind in ScheduleKind::ALL {
        for t in [600, 800, 1000] {
            let s = NoiseSchedule::build(kind, t).unwrap();
            let ab = s.alpha_bars();
            // Index 0 is the clean sample, ᾱ_0 = 1.
            assert_eq!(ab.len(), t + 1);
            assert!(ab[0] == 1.0 && ab[t] > 0.0, "{kind} T={t}");
            assert!(ab.windows(2).all(|w| w[1] < w[0]), "{kind} T={t}");
        }
    }
}
