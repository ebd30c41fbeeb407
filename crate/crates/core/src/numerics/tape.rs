//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node holds its
//! value, the operation that produced it, and (after [`Tape::backward`]) its
//! gradient with respect to the scalar root. Parameters enter the tape through
//! [`Tape::param`] and their gradients are folded back into the owning
//! [`ParamStore`] with [`Tape::accumulate_param_grads`].

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    BroadcastRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

/// Recorded computation graph. Node values, gradients and parent links together
/// form the differentiable values of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`. Nodes the
    /// root does not depend on report `None`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, zeros if `v` did not influence the root.
    pub fn grad_or_zero(&self, v: Var) -> Matrix {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a [n×d] + row [1×d]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `a [n×d] ∘ col [n×1]`, broadcasting the column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (am, cm) = (self.value(a), self.value(col));
        if cm.cols() != 1 || cm.rows() != am.rows() {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: am.shape(),
                rhs: cm.shape(),
            });
        }
        let mut v = am.clone();
        for r in 0..v.rows() {
            let s = cm.get(r, 0);
            v.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Sigmoid-weighted linear unit, `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("minimum", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), f64::min);
        Ok(self.push(v, Op::Minimum(a, b)))
    }

    /// Row sums, `[n×d] → [n×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::column((0..m.rows()).map(|r| m.row(r).iter().sum()).collect());
        self.push(v, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Repeats a `1×d` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: m.shape(),
                rhs: (n, m.cols()),
            });
        }
        let mut v = Matrix::zeros(n, m.cols());
        for r in 0..n {
            v.row_mut(r).copy_from_slice(m.data());
        }
        Ok(self.push(v, Op::BroadcastRows(a)))
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Reverse sweep from a scalar root. Gradients from any previous sweep
    /// are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Matrix::scalar(1.0));

        // Nodes are appended in topological order, so a reverse scan visits
        // every consumer before its inputs.
        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(b))?;
                    let gb = self.value(a).t_matmul(&g)?;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(b, g.map(|x| -x));
                    self.accumulate(a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(b), |x, y| x * y);
                    let gb = g.zip_map(self.value(a), |x, y| x * y);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(row, gr);
                    self.accumulate(a, g);
                }
                Op::MulCol(a, col) => {
                    let am = self.value(a);
                    let cm = self.value(col);
                    let mut ga = g.clone();
                    let mut gc = Matrix::zeros(cm.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cm.get(r, 0);
                        let dot: f64 = g.row(r).iter().zip(am.row(r)).map(|(x, y)| x * y).sum();
                        gc.set(r, 0, dot);
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(a, ga);
                    self.accumulate(col, gc);
                }
                Op::Scale(a, c) => self.accumulate(a, g.map(|x| x * c)),
                Op::AddScalar(a) => self.accumulate(a, g),
                Op::Tanh(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = g.zip_map(out, |x, t| x * (1.0 - t * t));
                    self.accumulate(a, ga);
                }
                Op::Sigmoid(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = g.zip_map(out, |x, s| x * s * (1.0 - s));
                    self.accumulate(a, ga);
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(a), |x, z| {
                        let s = sigmoid(z);
                        x * (s + z * s * (1.0 - s))
                    });
                    self.accumulate(a, ga);
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = g.zip_map(out, |x, e| x * e);
                    self.accumulate(a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(a), |x, z| 2.0 * z * x);
                    self.accumulate(a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(self.value(a), |x, z| if z < lo || z > hi { 0.0 } else { x });
                    self.accumulate(a, ga);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mask = av.zip_map(bv, |x, y| if x <= y { 1.0 } else { 0.0 });
                    let ga = g.zip_map(&mask, |x, m| x * m);
                    let gb = g.zip_map(&mask, |x, m| x * (1.0 - m));
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                    }
                    self.accumulate(a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    self.accumulate(a, Matrix::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(a);
                    let n = (r * c) as f64;
                    self.accumulate(a, Matrix::filled(r, c, g.item() / n));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Matrix::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        self.accumulate(p, gp);
                    }
                }
                Op::BroadcastRows(a) => {
                    let mut ga = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in ga.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(a, ga);
                }
            }
        }
        Ok(())
    }

    /// Adds gradients of every parameter node into `store`. A parameter
    /// placed on the tape more than once receives the sum.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                store.param_mut(*id).grad.add_assign(g);
            }
        }
    }
}
