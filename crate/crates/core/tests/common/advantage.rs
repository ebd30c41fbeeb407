use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rank_policy::ppo::gae;

/// `Σ_k (γζ)^k δ_{t+k}` summed directly, truncated at the first terminal.
pub fn brute_force_gae(r: &[f64], v: &[f64], done: &[bool], boot: f64, gamma: f64, zeta: f64) -> Vec<f64> {
    let n = r.len();
    let delta = |t: usize| {
        let next = if done[t] { 0.0 } else if t + 1 < n { v[t + 1] } else { boot };
        r[t] + gamma * next - v[t]
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for (k, &terminal) in done.iter().enumerate().skip(t) {
                total += (gamma * zeta).powi((k - t) as i32) * delta(k);
                if terminal {
                    break;
                }
            }
            total
        })
        .collect()
}

pub fn recursion_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let done: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let boot = rng.random_range(-2.0..2.0);
        let (g, z) = (rng.random_range(0.5..0.999), rng.random_range(0.0..1.0));
        let fast = gae(&r, &v, &done, boot, g, z).unwrap();
        let slow = brute_force_gae(&r, &v, &done, boot, g, z);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
