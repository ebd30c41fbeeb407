use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Linear, Matrix, ParamId, ParamStore, Tape, Var};

/// Sinusoidal embedding of a (training) timestep: `dim/2` sines followed by
/// `dim/2` cosines over geometrically spaced frequencies.
pub fn timestep_embedding(tau: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = tau as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserShape {
    pub action_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub blocks: usize,
}

/// Residual perceptron `f(Concat[x_τ, e_τ, cond]) → R^D`, with a learned
/// vector standing in for the condition when it is dropped.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub shape: DenoiserShape,
    pub store: ParamStore,
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
    null_cond: ParamId,
}

/// One row of a denoiser batch. `cond = None` selects the null condition.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub x_tau: &'a [f64],
    pub tau: usize,
    pub cond: Option<&'a [f64]>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(shape: DenoiserShape, rng: &mut R) -> Result<Self> {
        if shape.action_dim == 0 || shape.hidden == 0 || shape.embed_dim == 0 || !shape.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("bad denoiser shape {shape:?}")));
        }
        let mut store = ParamStore::new();
        let d = shape.action_dim;
        let input = Linear::new(&mut store, "in", 2 * d + shape.embed_dim, shape.hidden, 1.0, rng);
        let blocks = (0..shape.blocks)
            .map(|b| {
                let l1 = Linear::new(&mut store, &format!("block{b}.fc1"), shape.hidden, shape.hidden, 1.0, rng);
                let l2 = Linear::new(&mut store, &format!("block{b}.fc2"), shape.hidden, shape.hidden, 0.5, rng);
                (l1, l2)
            })
            .collect();
        let output = Linear::new(&mut store, "out", shape.hidden, d, 0.5, rng);
        let null_cond = store.add("null_cond", Matrix::zeros(1, d));
        Ok(Self {
            shape,
            store,
            input,
            blocks,
            output,
            null_cond,
        })
    }

    fn input_matrix(&self, rows: &[DenoiserInput<'_>]) -> Result<(Matrix, Matrix)> {
        let d = self.shape.action_dim;
        let e = self.shape.embed_dim;
        let width = 2 * d + e;
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut dropped = Vec::with_capacity(rows.len());
        for r in rows {
            if r.x_tau.len() != d {
                return Err(Error::invalid(format!("x_tau has {} entries, expected {d}", r.x_tau.len())));
            }
            data.extend_from_slice(r.x_tau);
            data.extend(timestep_embedding(r.tau, e));
            match r.cond {
                Some(c) if c.len() == d => {
                    data.extend_from_slice(c);
                    dropped.push(0.0);
                }
                Some(c) => {
                    return Err(Error::invalid(format!("condition has {} entries, expected {d}", c.len())))
                }
                None => {
                    data.extend(std::iter::repeat_n(0.0, d));
                    dropped.push(1.0);
                }
            }
        }
        Ok((
            Matrix::from_vec(rows.len(), width, data)?,
            Matrix::from_vec(rows.len(), 1, dropped)?,
        ))
    }

    /// Plain forward pass; one output row per input row.
    pub fn predict(&self, rows: &[DenoiserInput<'_>]) -> Result<Matrix> {
        let (mut x, dropped) = self.input_matrix(rows)?;
        let d = self.shape.action_dim;
        let null = self.store.value(self.null_cond);
        let cond_offset = d + self.shape.embed_dim;
        for i in 0..x.rows() {
            if dropped.get(i, 0) != 0.0 {
                x.row_mut(i)[cond_offset..].copy_from_slice(null.data());
            }
        }
        let act = Activation::Silu;
        let mut h = self.input.forward(&self.store, &x)?.map(|v| act.apply(v));
        for (l1, l2) in &self.blocks {
            let inner = l1.forward(&self.store, &h)?.map(|v| act.apply(v));
            let delta = l2.forward(&self.store, &inner)?;
            h.add_assign(&delta);
        }
        self.output.forward(&self.store, &h)
    }

    /// Tape forward pass; identical arithmetic to [`Denoiser::predict`].
    pub fn predict_tape(&self, tape: &mut Tape, rows: &[DenoiserInput<'_>]) -> Result<Var> {
        let (x, dropped) = self.input_matrix(rows)?;
        let d = self.shape.action_dim;
        let n = rows.len();
        // Split the input so the null vector can enter the graph.
        let pre_w = self.shape.embed_dim + d;
        let mut head = Vec::with_capacity(n * pre_w);
        let mut cond = Vec::with_capacity(n * d);
        for i in 0..n {
            head.extend_from_slice(&x.row(i)[..pre_w]);
            cond.extend_from_slice(&x.row(i)[pre_w..]);
        }
        let head = tape.constant(Matrix::from_vec(n, pre_w, head)?);
        let cond = tape.constant(Matrix::from_vec(n, d, cond)?);
        let null = tape.param(&self.store, self.null_cond);
        let null_rows = tape.broadcast_rows(null, n)?;
        let mask = tape.constant(dropped);
        let null_part = tape.mul_col(null_rows, mask)?;
        let cond = tape.add(cond, null_part)?;
        let input = tape.concat_cols(&[head, cond])?;

        let h = self.input.forward_tape(tape, &self.store, input)?;
        let mut h = tape.silu(h);
        for (l1, l2) in &self.blocks {
            let inner = l1.forward_tape(tape, &self.store, h)?;
            let inner = tape.silu(inner);
            let delta = l2.forward_tape(tape, &self.store, inner)?;
            h = tape.add(h, delta)?;
        }
        self.output.forward_tape(tape, &self.store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Denoiser::new(
            DenoiserShape {
                action_dim: 6,
                hidden: 16,
                embed_dim: 8,
                blocks: 2,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn plain_and_tape_paths_agree() {
        let mut net = small();
        net.store.param_mut(net.null_cond).value.fill(0.3);
        let x = [0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
        let c = [0.5; 6];
        let rows = [
            DenoiserInput { x_tau: &x, tau: 17, cond: Some(&c) },
            DenoiserInput { x_tau: &x, tau: 900, cond: None },
        ];
        let plain = net.predict(&rows).unwrap();
        let mut tape = Tape::new();
        let v = net.predict_tape(&mut tape, &rows).unwrap();
        assert_eq!(plain.shape(), (2, 6));
        for (a, b) in plain.data().iter().zip(tape.value(v).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_widths_are_rejected() {
        let net = small();
        let x = [0.0; 5];
        assert!(net.predict(&[DenoiserInput { x_tau: &x, tau: 1, cond: None }]).is_err());
    }
}
