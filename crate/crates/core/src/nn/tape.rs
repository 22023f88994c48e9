//! Dynamic reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so reverse iteration is a valid
//! topological order for the backward sweep. Parameter leaves borrow their
//! values from the [`ParamStore`]; nothing is copied.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{input, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SumRows(Var),
    LogSoftmaxRows(Var),
    PickCols(Var, Vec<usize>),
    Sum(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0] {
            Node { value: Some(t), .. } => t,
            Node { op: Op::Param(id), .. } => self.store.value(ParamId(*id)),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), [1, 1]);
        t.data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id.0), grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id.0, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul shapes {:?} x {:?}", ta.shape(), tb.shape());
        let out = Tensor::matmul(ta, tb);
        let g = self.g(a) || self.g(b);
        self.push(out, Op::MatMul(a, b), g)
    }

    /// Add a `1 × c` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!([1, tx.cols], tb.shape(), "bias shape");
        let mut out = tx.clone();
        for r in 0..out.rows {
            for (y, &c) in out.data[r * tx.cols..(r + 1) * tx.cols].iter_mut().zip(&tb.data) {
                *y += c;
            }
        }
        let g = self.g(x) || self.g(b);
        self.push(out, Op::AddBias(x, b), g)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes");
        let out = ta.zip(tb, f);
        let g = self.g(a) || self.g(b);
        self.push(out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Min(a, b))
    }

    /// `s·x + c`.
    pub fn affine(&mut self, x: Var, s: f64, c: f64) -> Var {
        let out = self.value(x).map(|v| s * v + c);
        let g = self.g(x);
        self.push(out, Op::Affine(x, s), g)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let g = self.g(x);
        self.push(out, Op::Relu(x), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let g = self.g(x);
        self.push(out, Op::Exp(x), g)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let g = self.g(x);
        self.push(out, Op::Ln(x), g)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let g = self.g(x);
        self.push(out, Op::Clamp(x, lo, hi), g)
    }

    /// Per-row layer normalization with learned `1 × c` scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        assert_eq!(tg.shape(), [1, c]);
        assert_eq!(tb.shape(), [1, c]);
        let mut xhat = Tensor::zeros(tx.rows, c);
        let mut inv_std = Vec::with_capacity(tx.rows);
        let mut out = Tensor::zeros(tx.rows, c);
        for r in 0..tx.rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat.data[r * c + j] = h;
                out.data[r * c + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let g = self.g(x) || self.g(gamma) || self.g(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, g)
    }

    /// Rows `idx[0], idx[1], …` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let tx = self.value(x);
        let mut out = Tensor::zeros(idx.len(), tx.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.data[i * tx.cols..(i + 1) * tx.cols].copy_from_slice(tx.row_slice(r));
        }
        let g = self.g(x);
        self.push(out, Op::GatherRows(x, idx), g)
    }

    /// `out[idx[i]] += x[i]` into `n_out` zero rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Vec<usize>, n_out: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(idx.len(), tx.rows);
        let c = tx.cols;
        let mut out = Tensor::zeros(n_out, c);
        for (i, &r) in idx.iter().enumerate() {
            for (y, &v) in out.data[r * c..(r + 1) * c].iter_mut().zip(tx.row_slice(i)) {
                *y += v;
            }
        }
        let g = self.g(x);
        self.push(out, Op::ScatterAddRows(x, idx), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row_slice(r));
            }
            off += t.cols;
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let out = Tensor::from_vec(rows, cols, t.data.clone());
        let g = self.g(x);
        self.push(out, Op::Reshape(x), g)
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (y, &v) in out.data.iter_mut().zip(t.row_slice(r)) {
                *y += v;
            }
        }
        let g = self.g(x);
        self.push(out, Op::SumRows(x), g)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let g = self.g(x);
        self.push(out, Op::LogSoftmaxRows(x), g)
    }

    /// `x[i, cols[i]]` as an `r × 1` column.
    pub fn pick_cols(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let t = self.value(x);
        assert_eq!(cols.len(), t.rows);
        let out = Tensor::column(cols.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect());
        let g = self.g(x);
        self.push(out, Op::PickCols(x, cols), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let g = self.g(x);
        self.push(out, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return input(format!("loss must be scalar, got shape {:?}", self.value(loss).shape()));
        }
        let mut out = Gradients::new(self.store.len());
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let y = self.nodes[i].value.as_ref();
            let mut send = |v: Var, d: Tensor| {
                if self.nodes[v.0].grad {
                    match &mut grads[v.0] {
                        Some(t) => t.add_assign(&d),
                        slot => *slot = Some(d),
                    }
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => out.add_to(*id, &dy),
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        send(*a, Tensor::matmul_nt(&dy, self.value(*b)));
                    }
                    if self.g(*b) {
                        send(*b, Tensor::matmul_tn(self.value(*a), &dy));
                    }
                }
                Op::AddBias(x, b) => {
                    let mut db = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (s, &v) in db.data.iter_mut().zip(dy.row_slice(r)) {
                            *s += v;
                        }
                    }
                    send(*b, db);
                    send(*x, dy);
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone());
                    send(*b, dy);
                }
                Op::Sub(a, b) => {
                    send(*a, dy.clone());
                    send(*b, dy.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    send(*a, dy.zip(self.value(*b), |d, y| d * y));
                    send(*b, dy.zip(self.value(*a), |d, x| d * x));
                }
                Op::Min(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mask = ta.zip(tb, |x, y| if x <= y { 1.0 } else { 0.0 });
                    send(*a, dy.zip(&mask, |d, m| d * m));
                    send(*b, dy.zip(&mask, |d, m| d * (1.0 - m)));
                }
                Op::Affine(x, s) => send(*x, dy.map(|d| d * s)),
                Op::Relu(x) => send(*x, dy.zip(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
                Op::Exp(x) => send(*x, dy.zip(y.unwrap(), |d, e| d * e)),
                Op::Ln(x) => send(*x, dy.zip(self.value(*x), |d, v| d / v)),
                Op::Clamp(x, lo, hi) => {
                    send(*x, dy.zip(self.value(*x), |d, v| if v > *lo && v < *hi { d } else { 0.0 }))
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = dy.cols;
                    let tg = self.value(*gamma);
                    let mut dg = Tensor::zeros(1, c);
                    let mut db = Tensor::zeros(1, c);
                    let mut dx = Tensor::zeros(dy.rows, c);
                    for r in 0..dy.rows {
                        let (d, h) = (dy.row_slice(r), xhat.row_slice(r));
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dg.data[j] += d[j] * h[j];
                            db.data[j] += d[j];
                            let dh = d[j] * tg.data[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        let k = inv_std[r] / c as f64;
                        for j in 0..c {
                            let dh = d[j] * tg.data[j];
                            dx.data[r * c + j] = k * (c as f64 * dh - s1 - h[j] * s2);
                        }
                    }
                    send(*gamma, dg);
                    send(*beta, db);
                    send(*x, dx);
                }
                Op::GatherRows(x, idx) => {
                    let tx = self.value(*x);
                    let mut dx = Tensor::zeros(tx.rows, tx.cols);
                    let c = tx.cols;
                    for (i, &r) in idx.iter().enumerate() {
                        for (s, &v) in dx.data[r * c..(r + 1) * c].iter_mut().zip(dy.row_slice(i)) {
                            *s += v;
                        }
                    }
                    send(*x, dx);
                }
                Op::ScatterAddRows(x, idx) => {
                    let c = dy.cols;
                    let mut dx = Tensor::zeros(idx.len(), c);
                    for (i, &r) in idx.iter().enumerate() {
                        dx.data[i * c..(i + 1) * c].copy_from_slice(dy.row_slice(r));
                    }
                    send(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut dp = Tensor::zeros(dy.rows, w);
                        for r in 0..dy.rows {
                            dp.data[r * w..(r + 1) * w].copy_from_slice(&dy.row_slice(r)[off..off + w]);
                        }
                        off += w;
                        send(p, dp);
                    }
                }
                Op::Reshape(x) => {
                    let t = self.value(*x);
                    send(*x, Tensor::from_vec(t.rows, t.cols, dy.data));
                }
                Op::SumRows(x) => {
                    let t = self.value(*x);
                    let mut dx = Tensor::zeros(t.rows, t.cols);
                    for r in 0..t.rows {
                        dx.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(&dy.data);
                    }
                    send(*x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = y.unwrap();
                    let mut dx = dy.clone();
                    for r in 0..dy.rows {
                        let s: f64 = dy.row_slice(r).iter().sum();
                        for (j, v) in dx.data[r * dy.cols..(r + 1) * dy.cols].iter_mut().enumerate() {
                            *v -= y.get(r, j).exp() * s;
                        }
                    }
                    send(*x, dx);
                }
                Op::PickCols(x, cols) => {
                    let t = self.value(*x);
                    let mut dx = Tensor::zeros(t.rows, t.cols);
                    for (r, &c) in cols.iter().enumerate() {
                        dx.data[r * t.cols + c] = dy.data[r];
                    }
                    send(*x, dx);
                }
                Op::Sum(x) => {
                    let t = self.value(*x);
                    send(*x, Tensor::from_vec(t.rows, t.cols, vec![dy.data[0]; t.len()]));
                }
            }
        }
        Ok(out)
    }
}

/// `ln Σ exp(x)` with max-subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax with max-subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

/// Normalize to zero mean and unit variance (before any learned scale), guarded by [`LN_EPS`].
pub fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
}
