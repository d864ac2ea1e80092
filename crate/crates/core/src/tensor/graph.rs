//! The tape: a topologically ordered list of primitive applications.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order so every node's inputs precede it, and [`Graph::backward`]
//! walks the list once in reverse.

use super::gemm::{gemm, View, ViewMut};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::{Result, Tensor, TensorError};
use rand::Rng;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    Dropout(usize, Vec<f64>),
    MeanRows(usize),
    Sum(usize),
    Outer(usize, usize),
    Bce {
        logit: usize,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Largest f64 strictly below one; sigmoid outputs are clamped to it so the
/// open-interval contract holds even where `1/(1+e^-x)` rounds to 1.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Per-head attention weights `[heads × queries × keys]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, weights, .. } => Some((*heads, weights)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        check_finite(name, value.data())?;
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input-sensitivity checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bring a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        if let Some(n) = self.param_nodes[id.0] {
            return Var(n);
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.cols() != tb.rows() || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(ta.data(), m, k),
            View::dense(tb.data(), k, n),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        let t = Tensor::matrix(m, n, out)?;
        self.push_checked("matmul", t, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(name, t, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `x + row`, broadcasting a `1 × n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.val(x.0), self.val(row.0));
        if tr.numel() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tr.data()[i % c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("add_row", t, Op::AddRow(x.0, row.0), &[x.0, row.0])
    }

    /// `x·w + b` for `x: [m×k]`, `w: [k×n]`, `b: [1×n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.val(x.0);
        let data = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("scale", t, Op::Scale(x.0, c), &[x.0])
    }

    /// `x · s` with `s` a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.val(x.0), self.val(s.0));
        if ts.numel() != 1 {
            return Err(shape_err("mul_scalar", tx, ts));
        }
        let sv = ts.data()[0];
        let data = tx.data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("mul_scalar", t, Op::MulScalar(x.0, s.0), &[x.0, s.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.val(parts[0].0);
        let rows = first.rows();
        let mut total = 0;
        for p in parts {
            let t = self.val(p.0);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            total += t.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut c0 = 0;
        for p in parts {
            let t = self.val(p.0);
            let w = t.cols();
            for r in 0..rows {
                out[r * total + c0..r * total + c0 + w].copy_from_slice(t.row_slice(r));
            }
            c0 += w;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::matrix(rows, total, out)?;
        self.push_checked("concat_cols", t, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.val(parts[0].0);
        let cols = first.cols();
        let mut out = Vec::new();
        for p in parts {
            let t = self.val(p.0);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", first, t));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::matrix(rows, cols, out)?;
        self.push_checked("concat_rows", t, Op::ConcatRows(idx.clone()), &idx)
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x.0);
        if start >= end || end > tx.rows() {
            return Err(TensorError::Invalid(format!(
                "slice_rows [{start},{end}) out of range for {:?}",
                tx.shape()
            )));
        }
        let c = tx.cols();
        let data = tx.data()[start * c..end * c].to_vec();
        let t = Tensor::matrix(end - start, c, data)?;
        self.push_checked("slice_rows", t, Op::SliceRows(x.0, start), &[x.0])
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x.0);
        if start >= end || end > tx.cols() {
            return Err(TensorError::Invalid(format!(
                "slice_cols [{start},{end}) out of range for {:?}",
                tx.shape()
            )));
        }
        let (rows, c, w) = (tx.rows(), tx.cols(), end - start);
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * c + start..r * c + end]);
        }
        let t = Tensor::matrix(rows, w, data)?;
        self.push_checked("slice_cols", t, Op::SliceCols(x.0, start), &[x.0])
    }

    /// Layer normalisation over the last axis with population variance and
    /// `eps = 1e-5`. A zero-variance row normalises to all zeros.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x.0), self.val(gain.0), self.val(bias.0));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        self.push_checked("layer_norm", t, op, &[x.0, gain.0, bias.0])
    }

    /// Row-wise softmax (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x.0);
        let mut data = tx.data().to_vec();
        softmax_rows_in_place(&mut data, tx.cols());
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("softmax", t, Op::Softmax(x.0), &[x.0])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.val(x.0);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked(name, t, op, &[x.0])
    }

    /// GELU with the exact Gaussian CDF, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu_scalar, Op::Gelu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid_scalar, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x.0))
    }

    /// Fused scaled dot-product attention over `heads` column blocks.
    ///
    /// `q: [nq×d]`, `k, v: [nk×d]`; each head uses scale `1/√(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if tk.cols() != d || tv.cols() != d {
            return Err(shape_err("attention", tq, tk));
        }
        if tk.rows() != tv.rows() {
            return Err(shape_err("attention", tk, tv));
        }
        let (nq, nk, dh) = (tq.rows(), tk.rows(), d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let w = &mut weights[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                scale,
                View::col_block(tq.data(), nq, d, h * dh, dh),
                View::col_block(tk.data(), nk, d, h * dh, dh).t(),
                0.0,
                ViewMut::dense(w, nq, nk),
            );
            softmax_rows_in_place(w, nk);
            gemm(
                1.0,
                View::dense(w, nq, nk),
                View::col_block(tv.data(), nk, d, h * dh, dh),
                0.0,
                ViewMut::col_block(&mut out, nq, d, h * dh, dh),
            );
        }
        let t = Tensor::matrix(nq, d, out)?;
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            heads,
            weights,
        };
        self.push_checked("attention", t, op, &[q.0, k.0, v.0])
    }

    /// Inverted dropout. Identity (no new node) at inference or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate {rate} must lie in [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.val(x.0);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("dropout", t, Op::Dropout(x.0, mask), &[x.0])
    }

    /// Mean over rows, giving `1 × cols`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x.0);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(tx.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let t = Tensor::row(out);
        self.push_checked("mean_rows", t, Op::MeanRows(x.0), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x.0).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Flattened outer product of two row vectors: `out[i·n + j] = a[i]·b[j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.rows() != 1 || tb.rows() != 1 {
            return Err(shape_err("outer", ta, tb));
        }
        let mut out = Vec::with_capacity(ta.numel() * tb.numel());
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|y| x * y));
        }
        let t = Tensor::row(out);
        self.push_checked("outer", t, Op::Outer(a.0, b.0), &[a.0, b.0])
    }

    /// Binary cross-entropy on a single logit, numerically stable form.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        let tz = self.val(logit.0);
        if tz.numel() != 1 {
            return Err(TensorError::NonScalarLoss(tz.shape().to_vec()));
        }
        let z = tz.data()[0];
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let op = Op::Bce {
            logit: logit.0,
            target,
        };
        self.push_checked("bce_with_logits", Tensor::scalar(loss), op, &[logit.0])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let node_grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { node_grads, params })
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |idx: usize, contrib: Vec<f64>| {
            if !self.nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        1.0,
                        View::dense(dy, m, n),
                        View::dense(tb.data(), k, n).t(),
                        0.0,
                        ViewMut::dense(&mut da, m, k),
                    );
                    acc(*a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        1.0,
                        View::dense(ta.data(), m, k).t(),
                        View::dense(dy, m, n),
                        0.0,
                        ViewMut::dense(&mut db, k, n),
                    );
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, dy.iter().zip(tb).map(|(g, v)| g * v).collect());
                acc(*b, dy.iter().zip(ta).map(|(g, v)| g * v).collect());
            }
            Op::AddRow(x, r) => {
                acc(*x, dy.to_vec());
                let c = self.val(*r).numel();
                let mut dr = vec![0.0; c];
                for (j, g) in dy.iter().enumerate() {
                    dr[j % c] += g;
                }
                acc(*r, dr);
            }
            Op::Scale(x, c) => acc(*x, dy.iter().map(|g| g * c).collect()),
            Op::MulScalar(x, s) => {
                let sv = self.val(*s).data()[0];
                let tx = self.val(*x).data();
                acc(*x, dy.iter().map(|g| g * sv).collect());
                acc(*s, vec![dy.iter().zip(tx).map(|(g, v)| g * v).sum()]);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut c0 = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * total + c0..r * total + c0 + w]);
                    }
                    acc(p, dp);
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    acc(p, dy[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.val(*x);
                let mut dx = vec![0.0; tx.numel()];
                let off = start * tx.cols();
                dx[off..off + dy.len()].copy_from_slice(dy);
                acc(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let tx = self.val(*x);
                let (c, w) = (tx.cols(), node.value.cols());
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..tx.rows() {
                    dx[r * c + start..r * c + start + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = self.val(*gain).data();
                let d = g.len();
                let rows = xhat.len() / d;
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..d {
                        let dxh = dyr[c] * g[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[c];
                        dg[c] += dyr[c] * xh[c];
                        db[c] += dyr[c];
                    }
                    let k = inv_std[r] / d as f64;
                    for c in 0..d {
                        let dxh = dyr[c] * g[c];
                        dx[r * d + c] = k * (d as f64 * dxh - sum_dxh - xh[c] * sum_dxh_xh);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &dy[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let tx = self.val(*x).data();
                acc(*x, dy.iter().zip(tx).map(|(g, &v)| g * gelu_grad_scalar(v)).collect());
            }
            Op::Sigmoid(x) => acc(*x, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Tanh(x) => acc(*x, dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (tq, tk, tv) = (self.val(*q), self.val(*k), self.val(*v));
                let d = tq.cols();
                let (nq, nk, dh) = (tq.rows(), tk.rows(), d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut da = vec![0.0; nq * nk];
                for h in 0..*heads {
                    let a = &weights[h * nq * nk..(h + 1) * nq * nk];
                    let dout = View::col_block(dy, nq, d, h * dh, dh);
                    gemm(
                        1.0,
                        dout,
                        View::col_block(tv.data(), nk, d, h * dh, dh).t(),
                        0.0,
                        ViewMut::dense(&mut da, nq, nk),
                    );
                    gemm(
                        1.0,
                        View::dense(a, nq, nk).t(),
                        dout,
                        0.0,
                        ViewMut::col_block(&mut dv, nk, d, h * dh, dh),
                    );
                    for r in 0..nq {
                        let ar = &a[r * nk..(r + 1) * nk];
                        let dr = &mut da[r * nk..(r + 1) * nk];
                        let dot: f64 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                        for j in 0..nk {
                            dr[j] = ar[j] * (dr[j] - dot);
                        }
                    }
                    gemm(
                        scale,
                        View::dense(&da, nq, nk),
                        View::col_block(tk.data(), nk, d, h * dh, dh),
                        0.0,
                        ViewMut::col_block(&mut dq, nq, d, h * dh, dh),
                    );
                    gemm(
                        scale,
                        View::dense(&da, nq, nk).t(),
                        View::col_block(tq.data(), nq, d, h * dh, dh),
                        0.0,
                        ViewMut::col_block(&mut dk, nk, d, h * dh, dh),
                    );
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Dropout(x, mask) => acc(*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::MeanRows(x) => {
                let tx = self.val(*x);
                let rows = tx.rows() as f64;
                let c = tx.cols();
                acc(*x, (0..tx.numel()).map(|j| dy[j % c] / rows).collect());
            }
            Op::Sum(x) => acc(*x, vec![dy[0]; self.val(*x).numel()]),
            Op::Outer(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                let n = tb.len();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; n];
                for (i, &av) in ta.iter().enumerate() {
                    for (j, &bv) in tb.iter().enumerate() {
                        let g = dy[i * n + j];
                        da[i] += g * bv;
                        db[j] += g * av;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Bce { logit, target } => {
                let z = self.val(*logit).data()[0];
                acc(*logit, vec![dy[0] * (sigmoid_scalar(z) - target)]);
            }
        }
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any tracked node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.node_grads[*n].as_ref())
    }

    /// Add every parameter gradient into `buf`.
    pub fn accumulate_into(&self, buf: &mut ParamGrads) {
        for &(id, n) in &self.params {
            if let Some(g) = &self.node_grads[n] {
                let dst = buf.get_mut(id);
                dst.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}
