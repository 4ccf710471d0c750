//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation in execution order. [`Graph::backward`]
//! consumes the graph, walks the tape in exact reverse order and returns the
//! gradients of the requested leaves and parameters. Gradients of a node used
//! by several operations are summed.

use std::collections::HashMap;

use crate::fastmath;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    TileRows { src: Var, times: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    WeightedRowMse { a: Var, b: Var, weights: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SoftmaxRows(Var),
    BatchNorm { src: Var, inv_std: Vec<f64> },
    Gru(Box<GruTape>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Saved activations of a fused GRU recurrence.
struct GruTape {
    xproj: Var,
    u: Var,
    h0: Option<Var>,
    batch: usize,
    steps: usize,
    hidden: usize,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// Hidden state entering each step, stacked time-major.
    h_prev: Vec<f64>,
    /// `r * h_prev`, stacked time-major.
    rh: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter from `store`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Reads a parameter value as a constant (no gradient).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn push_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn as_matrix(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&self, a: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        let (n, d) = self.as_matrix(a);
        if self.value(row).len() != d || self.shape(a).len() != 2 {
            return Err(Error::shape(name, self.shape(a), self.shape(row)));
        }
        Ok((n, d))
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(a, row, "add_row")?;
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(a, row, "mul_row")?;
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x *= b;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.unary(a, fastmath::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.unary(a, fastmath::sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (n, d) = self.as_matrix(a);
        if start + width > d || self.shape(a).len() != 2 {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, width]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + width]);
        }
        let value = Tensor::matrix(n, width, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceCols { src: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if self.shape(*p).len() != 2 || self.value(*p).rows() != n {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(*p)));
            }
            widths.push(self.value(*p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::matrix(n, total, data)?;
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (n, d) = self.as_matrix(a);
        if start + count > n || self.shape(a).len() != 2 {
            return Err(Error::shape("slice_rows", self.shape(a), &[start, count]));
        }
        let data = self.value(a).data()[start * d..(start + count) * d].to_vec();
        let value = Tensor::matrix(count, d, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceRows { src: a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if self.shape(*p).len() != 2 || self.value(*p).cols() != d {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(*p)));
            }
            data.extend_from_slice(self.value(*p).data());
            n += self.value(*p).rows();
        }
        let value = Tensor::matrix(n, d, data)?;
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Stacks `times` copies of a matrix vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (n, d) = self.as_matrix(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * d * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let value = Tensor::matrix(n * times, d, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::TileRows { src: a, times }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.len() != tt.len() || tp.is_empty() {
            return Err(Error::shape("mse", tp.shape(), tt.shape()));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(s / tp.len() as f64);
        let ng = self.needs(pred) || self.needs(target);
        Ok(self.push(value, Op::Mse(pred, target), ng))
    }

    /// `(1/n) * sum_i w_i * mean_k (a[i,k] - b[i,k])^2` over the `n` rows.
    pub fn weighted_row_mse(&mut self, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rows() != weights.len() || ta.is_empty() {
            return Err(Error::shape("weighted_row_mse", ta.shape(), tb.shape()));
        }
        let (n, d) = (ta.rows(), ta.cols());
        let mut total = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let row: f64 = ta
                .row(i)
                .iter()
                .zip(tb.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += w * row / d as f64;
        }
        let value = Tensor::scalar(total / n as f64);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            value,
            Op::WeightedRowMse {
                a,
                b,
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if t.shape().len() != 2 || n != labels.len() || n == 0 {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let probs = softmax_rows_raw(t.data(), c);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / n as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.cols() < 2 {
            return Err(Error::shape("softmax_rows", t.shape(), &[2]));
        }
        let value = Tensor::new(t.shape().to_vec(), softmax_rows_raw(t.data(), t.cols()))?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    /// Column-wise standardization with batch statistics. Returns the
    /// normalized values together with the batch mean and biased variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.rows() == 0 {
            return Err(Error::shape("batch_norm", t.shape(), &[]));
        }
        let (n, d) = (t.rows(), t.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(t.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = t.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for ((x, m), s) in chunk.iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - m) * s;
            }
        }
        let value = Tensor::matrix(n, d, data)?;
        let ng = self.needs(a);
        let out = self.push(value, Op::BatchNorm { src: a, inv_std }, ng);
        Ok((out, mean, var))
    }

    /// Fused GRU recurrence over a time-major input projection.
    ///
    /// `xproj` is `(steps * batch) x 3H` holding `W x_t + b` with gate columns
    /// ordered `[z | r | n]`; `u` is `H x 3H` in the same order. Rows
    /// `t * batch .. (t + 1) * batch` belong to step `t`. Returns all hidden
    /// states, stacked the same way.
    ///
    /// ```text
    /// z = sigmoid(xz + h U_z)
    /// r = sigmoid(xr + h U_r)
    /// n = tanh(xn + (r * h) U_n)
    /// h' = (1 - z) * n + z * h
    /// ```
    pub fn gru(&mut self, xproj: Var, u: Var, h0: Option<Var>, batch: usize) -> Result<Var> {
        let hidden = self.value(u).rows();
        let three = 3 * hidden;
        if self.shape(u) != [hidden, three] {
            return Err(Error::shape("gru recurrent weights", self.shape(u), &[hidden, three]));
        }
        let (rows, cols) = self.as_matrix(xproj);
        if cols != three || batch == 0 || rows % batch != 0 {
            return Err(Error::shape("gru input projection", self.shape(xproj), &[batch, three]));
        }
        if let Some(h0) = h0 {
            if self.shape(h0) != [batch, hidden] {
                return Err(Error::shape("gru initial state", self.shape(h0), &[batch, hidden]));
            }
        }
        let steps = rows / batch;
        let bh = batch * hidden;
        let xp = self.value(xproj).data();
        let uw = self.value(u).data();

        let mut z = vec![0.0; steps * bh];
        let mut r = vec![0.0; steps * bh];
        let mut n = vec![0.0; steps * bh];
        let mut h_prev = vec![0.0; steps * bh];
        let mut rh = vec![0.0; steps * bh];
        let mut out = vec![0.0; steps * bh];
        let mut h = match h0 {
            Some(h0) => self.value(h0).data().to_vec(),
            None => vec![0.0; bh],
        };
        let mut a_zr = vec![0.0; batch * 2 * hidden];
        let mut a_n = vec![0.0; bh];

        for t in 0..steps {
            let base = t * bh;
            let xrow = &xp[t * batch * three..(t + 1) * batch * three];
            for b in 0..batch {
                a_zr[b * 2 * hidden..(b + 1) * 2 * hidden]
                    .copy_from_slice(&xrow[b * three..b * three + 2 * hidden]);
                a_n[b * hidden..(b + 1) * hidden]
                    .copy_from_slice(&xrow[b * three + 2 * hidden..(b + 1) * three]);
            }
            gemm_strided(
                batch,
                hidden,
                2 * hidden,
                &h,
                hidden as isize,
                1,
                uw,
                three as isize,
                1,
                &mut a_zr,
                (2 * hidden) as isize,
                1.0,
            );
            fastmath::sigmoid_slice(&mut a_zr);
            for b in 0..batch {
                let gates = &a_zr[b * 2 * hidden..(b + 1) * 2 * hidden];
                z[base + b * hidden..base + (b + 1) * hidden].copy_from_slice(&gates[..hidden]);
                r[base + b * hidden..base + (b + 1) * hidden].copy_from_slice(&gates[hidden..]);
            }
            for k in 0..bh {
                rh[base + k] = r[base + k] * h[k];
            }
            gemm_strided(
                batch,
                hidden,
                hidden,
                &rh[base..base + bh],
                hidden as isize,
                1,
                &uw[2 * hidden..],
                three as isize,
                1,
                &mut a_n,
                hidden as isize,
                1.0,
            );
            h_prev[base..base + bh].copy_from_slice(&h);
            fastmath::tanh_slice(&mut a_n);
            n[base..base + bh].copy_from_slice(&a_n);
            for k in 0..bh {
                h[k] = a_n[k] + z[base + k] * (h[k] - a_n[k]);
            }
            out[base..base + bh].copy_from_slice(&h);
        }

        let value = Tensor::matrix(steps * batch, hidden, out)?;
        let ng = self.needs(xproj) || self.needs(u) || h0.is_some_and(|h| self.needs(h));
        let tape = GruTape {
            xproj,
            u,
            h0,
            batch,
            steps,
            hidden,
            z,
            r,
            n,
            h_prev,
            rh,
        };
        Ok(self.push(value, Op::Gru(Box::new(tape)), ng))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph { nodes, .. } = self;
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: &Var| nodes[v.0].needs_grad;
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (val(a).rows(), val(a).cols());
                    let n = val(b).cols();
                    if needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, val(b).data(), true, &mut da, 0.0);
                        accumulate(&mut grads[a.0], da);
                    }
                    if needs(b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, val(a).data(), true, &g, false, &mut db, 0.0);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.iter().map(|x| -x).collect());
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let d = g.iter().zip(val(b).data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads[a.0], d);
                    }
                    if needs(b) {
                        let d = g.iter().zip(val(a).data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::AddRow(a, row) => {
                    let d = val(row).len();
                    if needs(row) {
                        let mut dr = vec![0.0; d];
                        for chunk in g.chunks(d) {
                            for (s, x) in dr.iter_mut().zip(chunk) {
                                *s += x;
                            }
                        }
                        accumulate(&mut grads[row.0], dr);
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::MulRow(a, row) => {
                    let d = val(row).len();
                    let rv = val(row).data();
                    if needs(row) {
                        let mut dr = vec![0.0; d];
                        for (gc, ac) in g.chunks(d).zip(val(a).data().chunks(d)) {
                            for ((s, x), y) in dr.iter_mut().zip(gc).zip(ac) {
                                *s += x * y;
                            }
                        }
                        accumulate(&mut grads[row.0], dr);
                    }
                    if needs(a) {
                        let mut da = g;
                        for chunk in da.chunks_mut(d) {
                            for (x, r) in chunk.iter_mut().zip(rv) {
                                *x *= r;
                            }
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::Scale(a, c) => {
                    let d = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Tanh(a) => {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::SliceCols { src, start } => {
                    let (n, d) = (val(src).rows(), val(src).cols());
                    let w = node.value.cols();
                    let mut ds = vec![0.0; n * d];
                    for i in 0..n {
                        ds[i * d + start..i * d + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads[src.0], ds);
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = val(p).cols();
                        if needs(p) {
                            let mut dp = Vec::with_capacity(n * w);
                            for i in 0..n {
                                dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads[p.0], dp);
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { src, start } => {
                    let d = val(src).cols();
                    let mut ds = vec![0.0; val(src).len()];
                    ds[start * d..start * d + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads[src.0], ds);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(p).len();
                        if needs(p) {
                            accumulate(&mut grads[p.0], g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::TileRows { src, times } => {
                    let len = val(src).len();
                    let mut ds = vec![0.0; len];
                    for c in 0..*times {
                        for (s, x) in ds.iter_mut().zip(&g[c * len..(c + 1) * len]) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads[src.0], ds);
                }
                Op::Reshape(a) => accumulate(&mut grads[a.0], g),
                Op::Sum(a) => {
                    accumulate(&mut grads[a.0], vec![g[0]; val(a).len()]);
                }
                Op::Mean(a) => {
                    let len = val(a).len();
                    accumulate(&mut grads[a.0], vec![g[0] / len as f64; len]);
                }
                Op::Mse(p, t) => {
                    let len = val(p).len() as f64;
                    let d: Vec<f64> = val(p)
                        .data()
                        .iter()
                        .zip(val(t).data())
                        .map(|(x, y)| 2.0 * (x - y) / len * g[0])
                        .collect();
                    if needs(t) {
                        accumulate(&mut grads[t.0], d.iter().map(|x| -x).collect());
                    }
                    if needs(p) {
                        accumulate(&mut grads[p.0], d);
                    }
                }
                Op::WeightedRowMse { a, b, weights } => {
                    let (n, d) = (val(a).rows(), val(a).cols());
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        let c = 2.0 * weights[i] / (n * d) as f64 * g[0];
                        for k in 0..d {
                            da[i * d + k] = c * (val(a).data()[i * d + k] - val(b).data()[i * d + k]);
                        }
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], da.iter().map(|x| -x).collect());
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = val(logits).cols();
                    let n = labels.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p / n * g[0]).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] -= g[0] / n;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
                Op::SoftmaxRows(a) => {
                    let c = node.value.cols();
                    let mut d = vec![0.0; g.len()];
                    for ((dc, gc), yc) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(node.value.data().chunks(c))
                    {
                        let dot: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in dc.iter_mut().zip(gc).zip(yc) {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::BatchNorm { src, inv_std } => {
                    let (n, d) = (node.value.rows(), node.value.cols());
                    let xhat = node.value.data();
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gx = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            sum_g[j] += g[i * d + j];
                            sum_gx[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    let nf = n as f64;
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            let k = i * d + j;
                            dx[k] = inv_std[j] / nf * (nf * g[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                        }
                    }
                    accumulate(&mut grads[src.0], dx);
                }
                Op::Gru(tape) => {
                    let (dx, du, dh0) = gru_backward(tape, val(&tape.u).data(), &g);
                    if needs(&tape.xproj) {
                        accumulate(&mut grads[tape.xproj.0], dx);
                    }
                    if needs(&tape.u) {
                        accumulate(&mut grads[tape.u.0], du);
                    }
                    if let Some(h0) = tape.h0 {
                        if needs(&h0) {
                            accumulate(&mut grads[h0.0], dh0);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn gru_backward(tape: &GruTape, u: &[f64], g_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (batch, steps, hidden) = (tape.batch, tape.steps, tape.hidden);
    let three = 3 * hidden;
    let bh = batch * hidden;
    let mut dxproj = vec![0.0; steps * batch * three];
    let mut dh = vec![0.0; bh];
    let mut dh_prev = vec![0.0; bh];
    let mut d_rh = vec![0.0; bh];

    for t in (0..steps).rev() {
        let base = t * bh;
        for (d, go) in dh.iter_mut().zip(&g_out[base..base + bh]) {
            *d += go;
        }
        let drow = &mut dxproj[t * batch * three..(t + 1) * batch * three];
        for b in 0..batch {
            for j in 0..hidden {
                let k = b * hidden + j;
                let (z, n, hp) = (tape.z[base + k], tape.n[base + k], tape.h_prev[base + k]);
                let dn = dh[k] * (1.0 - z);
                let dz = dh[k] * (hp - n);
                dh_prev[k] = dh[k] * z;
                drow[b * three + 2 * hidden + j] = dn * (1.0 - n * n);
                drow[b * three + j] = dz * z * (1.0 - z);
            }
        }
        // d(r*h) = da_n U_n^T
        gemm_strided(
            batch,
            hidden,
            hidden,
            &drow[2 * hidden..],
            three as isize,
            1,
            &u[2 * hidden..],
            1,
            three as isize,
            &mut d_rh,
            hidden as isize,
            0.0,
        );
        for b in 0..batch {
            for j in 0..hidden {
                let k = b * hidden + j;
                let (r, hp) = (tape.r[base + k], tape.h_prev[base + k]);
                let dr = d_rh[k] * hp;
                dh_prev[k] += d_rh[k] * r;
                drow[b * three + hidden + j] = dr * r * (1.0 - r);
            }
        }
        // dh_prev += [da_z | da_r] U_zr^T
        gemm_strided(
            batch,
            2 * hidden,
            hidden,
            drow,
            three as isize,
            1,
            u,
            1,
            three as isize,
            &mut dh_prev,
            hidden as isize,
            1.0,
        );
        std::mem::swap(&mut dh, &mut dh_prev);
    }

    let rows = steps * batch;
    let mut du = vec![0.0; hidden * three];
    // dU_zr = H_prev^T [da_z | da_r]
    gemm_strided(
        hidden,
        rows,
        2 * hidden,
        &tape.h_prev,
        1,
        hidden as isize,
        &dxproj,
        three as isize,
        1,
        &mut du,
        three as isize,
        0.0,
    );
    // dU_n = (r*h)^T da_n
    gemm_strided(
        hidden,
        rows,
        hidden,
        &tape.rh,
        1,
        hidden as isize,
        &dxproj[2 * hidden..],
        three as isize,
        1,
        &mut du[2 * hidden..],
        three as isize,
        0.0,
    );
    (dxproj, du, dh)
}

pub(crate) fn softmax_rows_raw(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    out
}

/// Plain row-wise softmax outside of any graph.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    Tensor::new(logits.shape().to_vec(), softmax_rows_raw(logits.data(), c)).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        assert_eq!(g.value(t).item(), 0.0);
        assert_eq!(g.value(s).item(), 0.5);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let bad = g.constant(Tensor::vector(vec![1.0]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let l = g.constant(mat(&[
            vec![0.0, 0.0, 0.0],
            vec![1000.0, 0.0, 0.0],
            vec![2f64.ln(), 0.0, 0.0],
        ]));
        let p = g.softmax_rows(l).unwrap();
        let v = g.value(p).data().to_vec();
        for x in &v[0..3] {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(v[3], 1.0, epsilon = 1e-15);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(v[6], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[7], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(v[8], 0.25, epsilon = 1e-15);
        let one = g.constant(mat(&[vec![1.0]]));
        assert!(g.softmax_rows(one).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let cases = [
            (vec![1.0, 2.0], vec![1.0, 2.0], 0.0),
            (vec![0.0, 0.0], vec![1.0, 1.0], 1.0),
            (vec![1.0, 3.0], vec![2.0, 5.0], 2.5),
        ];
        for (p, t, want) in cases {
            let p = g.constant(Tensor::vector(p));
            let t = g.constant(Tensor::vector(t));
            let l = g.mse(p, t).unwrap();
            assert_eq!(g.scalar(l), want);
        }
        let p = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let t = g.constant(Tensor::vector(vec![1.0]));
        assert!(g.mse(p, t).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = g.constant(mat(&[vec![0.0, 0.0, 0.0]]));
        let l = g.cross_entropy(u, &[1]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 3f64.ln(), epsilon = 1e-12);

        let s = g.constant(mat(&[vec![0.0, 800.0, 0.0]]));
        let l = g.cross_entropy(s, &[1]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.0, epsilon = 1e-12);

        let h = g.constant(mat(&[vec![2f64.ln(), 0.0, 0.0]]));
        let l = g.cross_entropy(h, &[0]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 2f64.ln(), epsilon = 1e-12);

        assert!(matches!(
            g.cross_entropy(h, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.trainable("w", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let zeroed = g.scale(w, 0.0);
        let c = g.constant(Tensor::vector(vec![5.0, 5.0]));
        let total = g.add(zeroed, c).unwrap();
        let loss = g.sum(total);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn double_use_accumulates() {
        // d/dx (3x + 5x) is exactly the sum of the two single-use gradients
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.7, -1.1]));
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[8.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn param_registered_once() {
        let mut store = ParamStore::new();
        let id = store.trainable("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let l = g.mul(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[4.0]);
    }
}
