#![allow(dead_code)]

pub mod advantage;
pub mod diffusion;
pub mod gradients;

use rank_policy::numerics::ParamStore;

/// Central differences of `f` at `x` with step `h`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of `loss` with respect to selected scalar entries of
/// a parameter store. `entries` holds `(param index, flat offset)` pairs.
pub fn store_finite_difference(
    store: &ParamStore,
    entries: &[(usize, usize)],
    h: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> Vec<f64> {
    let mut probe = store.clone();
    entries
        .iter()
        .map(|&(p, k)| {
            let id = probe.ids().nth(p).unwrap();
            let orig = probe.value(id).data()[k];
            probe.param_mut(id).value.data_mut()[k] = orig + h;
            let up = loss(&probe);
            probe.param_mut(id).value.data_mut()[k] = orig - h;
            let down = loss(&probe);
            probe.param_mut(id).value.data_mut()[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Reads the accumulated gradient at the same entries.
pub fn store_grads(store: &ParamStore, entries: &[(usize, usize)]) -> Vec<f64> {
    entries
        .iter()
        .map(|&(p, k)| {
            let id = store.ids().nth(p).unwrap();
            store.grad(id).data()[k]
        })
        .collect()
}

/// Every entry of every parameter, or an evenly strided subset of at most
/// `limit` entries.
pub fn sample_entries(store: &ParamStore, limit: usize) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.value.len()).map(move |k| (p, k)))
        .collect();
    if all.len() <= limit {
        return all;
    }
    let stride = all.len() as f64 / limit as f64;
    (0..limit).map(|i| all[(i as f64 * stride) as usize]).collect()
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
