//! Tape-based compute graph with reverse-mode differentiation.
//!
//! Operations append nodes to the tape as they execute, so tape order is a
//! topological order and the backward sweep is a single reverse pass that
//! visits each node exactly once. Reductions (matmul rows, sums, means,
//! normalization statistics, softmax denominators) accumulate in `f64`
//! regardless of the storage type.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Op<S> {
    /// Constant input; no gradient tracked.
    Leaf,
    /// Differentiable input; gradient kept for querying.
    Var,
    /// Differentiable leaf bound to an external parameter slot.
    Param(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Tanh(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        xhat: Tensor<S>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    AddRowVec(usize, usize),
    AddColVec(usize, usize),
    RowSum(usize),
    MeanRows(usize),
    SumAll(usize),
    Mse(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize, end: usize },
    SliceCols { x: usize, start: usize, end: usize },
    PairwiseSqdist(usize),
}

pub struct Graph<S> {
    ops: Vec<Op<S>>,
    vals: Vec<Tensor<S>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor<S>>>,
    param_cache: HashMap<usize, Val>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            vals: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires: bool) -> Val {
        self.ops.push(op);
        self.vals.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        Val(self.ops.len() - 1)
    }

    fn req(&self, v: Val) -> bool {
        self.requires[v.0]
    }

    /// Constant input; excluded from differentiation.
    pub fn leaf(&mut self, t: Tensor<S>) -> Val {
        self.push(Op::Leaf, t, false)
    }

    /// Differentiable input; query its gradient after `backward`.
    pub fn var(&mut self, t: Tensor<S>) -> Val {
        self.push(Op::Var, t, true)
    }

    /// Differentiable leaf bound to parameter slot `key`. Repeated binds of
    /// the same key return the same node so shared weights accumulate
    /// gradients from every use site.
    pub fn param_leaf(&mut self, key: usize, t: Tensor<S>) -> Val {
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let v = self.push(Op::Param(key), t, true);
        self.param_cache.insert(key, v);
        v
    }

    pub fn value(&self, v: Val) -> &Tensor<S> {
        &self.vals[v.0]
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was computed.
    pub fn grad(&self, v: Val) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// (param key, gradient) pairs from the last backward sweep.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<S>)> {
        self.ops.iter().zip(&self.grads).filter_map(|(op, g)| match (op, g) {
            (Op::Param(k), Some(grad)) => Some((*k, grad)),
            _ => None,
        })
    }

    fn shape_eq(&self, ctx: &str, a: Val, b: Val) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::shape(ctx, self.vals[a.0].shape(), self.vals[b.0].shape()));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.shape_eq("add", a, b)?;
        let data = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.vals[a.0].shape().to_vec(), data)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Add(a.0, b.0), t, r))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.shape_eq("sub", a, b)?;
        let data = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.vals[a.0].shape().to_vec(), data)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Sub(a.0, b.0), t, r))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.shape_eq("mul", a, b)?;
        let data = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.vals[a.0].shape().to_vec(), data)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Mul(a.0, b.0), t, r))
    }

    pub fn scale(&mut self, a: Val, k: f64) -> Val {
        let ks = S::from_f64(k);
        let data = self.vals[a.0].iter().map(|&x| x * ks).collect();
        let t = Tensor { shape: self.vals[a.0].shape().to_vec(), data };
        let r = self.req(a);
        self.push(Op::Scale(a.0, k), t, r)
    }

    pub fn exp(&mut self, a: Val) -> Val {
        let data = self.vals[a.0].iter().map(|&x| x.exp()).collect();
        let t = Tensor { shape: self.vals[a.0].shape().to_vec(), data };
        let r = self.req(a);
        self.push(Op::Exp(a.0), t, r)
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let data = self.vals[a.0].iter().map(|&x| x.tanh()).collect();
        let t = Tensor { shape: self.vals[a.0].shape().to_vec(), data };
        let r = self.req(a);
        self.push(Op::Tanh(a.0), t, r)
    }

    pub fn gelu(&mut self, a: Val) -> Val {
        let data = self.vals[a.0].iter().map(|&x| S::from_f64(gelu_f64(x.to_f64()))).collect();
        let t = Tensor { shape: self.vals[a.0].shape().to_vec(), data };
        let r = self.req(a);
        self.push(Op::Gelu(a.0), t, r)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let t = matmul_raw(ta, tb);
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul(a.0, b.0), t, r))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let ta = &self.vals[a.0];
        if ta.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose expects 2-D, got {:?}", ta.shape())));
        }
        let t = transpose_raw(ta);
        let r = self.req(a);
        Ok(self.push(Op::Transpose(a.0), t, r))
    }

    /// `m + r` broadcasting the single row `r` down every row of `m`.
    pub fn add_row_vec(&mut self, m: Val, r: Val) -> Result<Val> {
        let (tm, tr) = (&self.vals[m.0], &self.vals[r.0]);
        if tr.rows() != 1 || tr.cols() != tm.cols() {
            return Err(Error::shape("add_row_vec", tm.shape(), tr.shape()));
        }
        let cols = tm.cols();
        let data = tm
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % cols])
            .collect();
        let t = Tensor { shape: tm.shape().to_vec(), data };
        let req = self.req(m) || self.req(r);
        Ok(self.push(Op::AddRowVec(m.0, r.0), t, req))
    }

    /// `m + c` broadcasting the column `c` (shape `[n, 1]`) across every column.
    pub fn add_col_vec(&mut self, m: Val, c: Val) -> Result<Val> {
        let (tm, tc) = (&self.vals[m.0], &self.vals[c.0]);
        if tc.cols() != 1 || tc.rows() != tm.rows() {
            return Err(Error::shape("add_col_vec", tm.shape(), tc.shape()));
        }
        let cols = tm.cols();
        let data = tm
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tc.data()[i / cols])
            .collect();
        let t = Tensor { shape: tm.shape().to_vec(), data };
        let req = self.req(m) || self.req(c);
        Ok(self.push(Op::AddColVec(m.0, c.0), t, req))
    }

    // ---- normalization ----

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f64) -> Result<Val> {
        let tx = &self.vals[x.0];
        let (n, d) = (tx.rows(), tx.cols());
        if self.vals[gamma.0].len() != d || self.vals[beta.0].len() != d {
            return Err(Error::shape("layer_norm affine", tx.shape(), self.vals[gamma.0].shape()));
        }
        let mut xhat = vec![S::zero(); n * d];
        let mut inv_std = vec![0.0f64; n];
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j].to_f64() - mean) * inv;
                xhat[i * d + j] = S::from_f64(xh);
                out[i * d + j] = S::from_f64(
                    xh * self.vals[gamma.0].data()[j].to_f64()
                        + self.vals[beta.0].data()[j].to_f64(),
                );
            }
        }
        let xhat = Tensor { shape: tx.shape().to_vec(), data: xhat };
        let t = Tensor { shape: tx.shape().to_vec(), data: out };
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps, xhat, inv_std },
            t,
            req,
        ))
    }

    /// Row-wise softmax (stable).
    pub fn softmax_rows(&mut self, a: Val) -> Val {
        let ta = &self.vals[a.0];
        let (n, d) = (ta.rows(), ta.cols());
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &ta.data()[i * d..(i + 1) * d];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0f64;
            for v in row {
                denom += (v.to_f64() - max).exp();
            }
            for j in 0..d {
                out[i * d + j] = S::from_f64((row[j].to_f64() - max).exp() / denom);
            }
        }
        let t = Tensor { shape: ta.shape().to_vec(), data: out };
        let r = self.req(a);
        self.push(Op::SoftmaxRows(a.0), t, r)
    }

    // ---- reductions ----

    /// Sum over each row: `[n, d] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Val) -> Val {
        let ta = &self.vals[a.0];
        let (n, d) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s: f64 = ta.data()[i * d..(i + 1) * d].iter().map(|v| v.to_f64()).sum();
            out.push(S::from_f64(s));
        }
        let t = Tensor { shape: vec![n, 1], data: out };
        let r = self.req(a);
        self.push(Op::RowSum(a.0), t, r)
    }

    /// Mean across rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, a: Val) -> Val {
        let ta = &self.vals[a.0];
        let (n, d) = (ta.rows(), ta.cols());
        let mut acc = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                acc[j] += ta.data()[i * d + j].to_f64();
            }
        }
        let out = acc.iter().map(|&s| S::from_f64(s / n as f64)).collect();
        let t = Tensor { shape: vec![1, d], data: out };
        let r = self.req(a);
        self.push(Op::MeanRows(a.0), t, r)
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&mut self, a: Val) -> Val {
        let s: f64 = self.vals[a.0].iter().map(|v| v.to_f64()).sum();
        let r = self.req(a);
        self.push(Op::SumAll(a.0), Tensor::scalar(S::from_f64(s)), r)
    }

    /// Mean squared error over all elements -> scalar.
    pub fn mse(&mut self, a: Val, b: Val) -> Result<Val> {
        self.shape_eq("mse", a, b)?;
        let n = self.vals[a.0].len();
        let s: f64 = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2))
            .sum();
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Mse(a.0, b.0), Tensor::scalar(S::from_f64(s / n as f64)), r))
    }

    /// Mean cross-entropy of row logits against class labels -> scalar.
    pub fn cross_entropy(&mut self, logits: Val, labels: &[usize]) -> Result<Val> {
        let tl = &self.vals[logits.0];
        let (n, c) = (tl.rows(), tl.cols());
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} label(s) for {} row(s)",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Range(format!("label {bad} out of {c} classes")));
        }
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &tl.data()[i * c..(i + 1) * c];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[y].to_f64();
        }
        let r = self.req(logits);
        Ok(self.push(
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec() },
            Tensor::scalar(S::from_f64(loss / n as f64)),
            r,
        ))
    }

    // ---- shape surgery ----

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = self.vals[parts[0].0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = &self.vals[p.0];
            if tp.cols() != cols {
                return Err(Error::shape("concat_rows", self.vals[parts[0].0].shape(), tp.shape()));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let t = Tensor { shape: vec![rows, cols], data };
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), t, req))
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let rows = self.vals[parts[0].0].rows();
        let total: usize = parts.iter().map(|&p| self.vals[p.0].cols()).sum();
        for &p in parts {
            if self.vals[p.0].rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.vals[parts[0].0].shape(),
                    self.vals[p.0].shape(),
                ));
            }
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let tp = &self.vals[p.0];
                let c = tp.cols();
                data.extend_from_slice(&tp.data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor { shape: vec![rows, total], data };
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), t, req))
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Val, start: usize, end: usize) -> Result<Val> {
        let ta = &self.vals[a.0];
        let (n, d) = (ta.rows(), ta.cols());
        if start >= end || end > n {
            return Err(Error::Range(format!("slice_rows [{start}, {end}) of {n} rows")));
        }
        let data = ta.data()[start * d..end * d].to_vec();
        let t = Tensor { shape: vec![end - start, d], data };
        let r = self.req(a);
        Ok(self.push(Op::SliceRows { x: a.0, start, end }, t, r))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Val, start: usize, end: usize) -> Result<Val> {
        let ta = &self.vals[a.0];
        let (n, d) = (ta.rows(), ta.cols());
        if start >= end || end > d {
            return Err(Error::Range(format!("slice_cols [{start}, {end}) of {d} cols")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * d + start..i * d + end]);
        }
        let t = Tensor { shape: vec![n, w], data };
        let r = self.req(a);
        Ok(self.push(Op::SliceCols { x: a.0, start, end }, t, r))
    }

    /// Squared Euclidean distances between the rows of a 2-D tensor:
    /// `[n, d] -> [n, n]`. Exactly symmetric with an exactly zero diagonal.
    pub fn pairwise_sqdist(&mut self, a: Val) -> Result<Val> {
        let ta = &self.vals[a.0];
        if ta.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "pairwise_sqdist expects 2-D, got {:?}",
                ta.shape()
            )));
        }
        let (n, d) = (ta.rows(), ta.cols());
        let mut out = vec![S::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let mut s = 0.0f64;
                for k in 0..d {
                    let diff = ta.data()[i * d + k].to_f64() - ta.data()[j * d + k].to_f64();
                    s += diff * diff;
                }
                let v = S::from_f64(s);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        let t = Tensor { shape: vec![n, n], data: out };
        let r = self.req(a);
        Ok(self.push(Op::PairwiseSqdist(a.0), t, r))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Node gradients from any previous
    /// sweep on this graph are discarded; parameter buffers are external and
    /// unaffected (see `ParamSet::accumulate_from`).
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));
        for idx in (0..=loss.0).rev() {
            if !self.requires[idx] {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, delta: Tensor<S>) {
        if !self.requires[node] {
            return;
        }
        match &mut self.grads[node] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.iter()) {
                    *gv = *gv + *dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<S>) {
        // Ops are cheap to match; gradients flow only into parents that
        // require them.
        match std::mem::replace(&mut self.ops[idx], Op::Leaf) {
            op @ (Op::Leaf | Op::Var | Op::Param(_)) => {
                self.ops[idx] = op;
            }
            op @ Op::Add(a, b) => {
                self.add_grad(a, g.clone());
                self.add_grad(b, g.clone());
                self.ops[idx] = op;
            }
            op @ Op::Sub(a, b) => {
                self.add_grad(a, g.clone());
                let neg = Tensor {
                    shape: g.shape().to_vec(),
                    data: g.iter().map(|&v| -v).collect(),
                };
                self.add_grad(b, neg);
                self.ops[idx] = op;
            }
            op @ Op::Mul(a, b) => {
                let da = ew_mul(g, &self.vals[b]);
                let db = ew_mul(g, &self.vals[a]);
                self.add_grad(a, da);
                self.add_grad(b, db);
                self.ops[idx] = op;
            }
            op @ Op::Scale(a, k) => {
                let ks = S::from_f64(k);
                let da = Tensor {
                    shape: g.shape().to_vec(),
                    data: g.iter().map(|&v| v * ks).collect(),
                };
                self.add_grad(a, da);
                self.ops[idx] = op;
            }
            op @ Op::Matmul(a, b) => {
                if self.requires[a] {
                    let bt = transpose_raw(&self.vals[b]);
                    self.add_grad(a, matmul_raw(g, &bt));
                }
                if self.requires[b] {
                    let at = transpose_raw(&self.vals[a]);
                    self.add_grad(b, matmul_raw(&at, g));
                }
                self.ops[idx] = op;
            }
            op @ Op::Transpose(a) => {
                self.add_grad(a, transpose_raw(g));
                self.ops[idx] = op;
            }
            op @ Op::Exp(a) => {
                let da = ew_mul(g, &self.vals[idx]);
                self.add_grad(a, da);
                self.ops[idx] = op;
            }
            op @ Op::Tanh(a) => {
                let y = &self.vals[idx];
                let data = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                    .collect();
                self.add_grad(a, Tensor { shape: g.shape().to_vec(), data });
                self.ops[idx] = op;
            }
            op @ Op::Gelu(a) => {
                let x = &self.vals[a];
                let data = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| S::from_f64(gv.to_f64() * gelu_grad_f64(xv.to_f64())))
                    .collect();
                self.add_grad(a, Tensor { shape: g.shape().to_vec(), data });
                self.ops[idx] = op;
            }
            Op::LayerNorm { x, gamma, beta, eps, xhat, inv_std } => {
                let (n, d) = (self.vals[x].rows(), self.vals[x].cols());
                if self.requires[beta] {
                    let mut db = vec![0.0f64; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g.data()[i * d + j].to_f64();
                        }
                    }
                    let t = Tensor {
                        shape: self.vals[beta].shape().to_vec(),
                        data: db.iter().map(|&v| S::from_f64(v)).collect(),
                    };
                    self.add_grad(beta, t);
                }
                if self.requires[gamma] {
                    let mut dg = vec![0.0f64; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] +=
                                g.data()[i * d + j].to_f64() * xhat.data()[i * d + j].to_f64();
                        }
                    }
                    let t = Tensor {
                        shape: self.vals[gamma].shape().to_vec(),
                        data: dg.iter().map(|&v| S::from_f64(v)).collect(),
                    };
                    self.add_grad(gamma, t);
                }
                if self.requires[x] {
                    let mut dx = vec![S::zero(); n * d];
                    for i in 0..n {
                        let mut mean_dxh = 0.0f64;
                        let mut mean_dxh_xh = 0.0f64;
                        let mut dxh = vec![0.0f64; d];
                        for j in 0..d {
                            let v = g.data()[i * d + j].to_f64()
                                * self.vals[gamma].data()[j].to_f64();
                            dxh[j] = v;
                            mean_dxh += v;
                            mean_dxh_xh += v * xhat.data()[i * d + j].to_f64();
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let xh = xhat.data()[i * d + j].to_f64();
                            dx[i * d + j] = S::from_f64(
                                inv_std[i] * (dxh[j] - mean_dxh - xh * mean_dxh_xh),
                            );
                        }
                    }
                    self.add_grad(x, Tensor { shape: self.vals[x].shape().to_vec(), data: dx });
                }
                self.ops[idx] = Op::LayerNorm { x, gamma, beta, eps, xhat, inv_std };
            }
            op @ Op::SoftmaxRows(a) => {
                let y = &self.vals[idx];
                let (n, d) = (y.rows(), y.cols());
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    let dot: f64 = (0..d)
                        .map(|j| g.data()[i * d + j].to_f64() * y.data()[i * d + j].to_f64())
                        .sum();
                    for j in 0..d {
                        let yv = y.data()[i * d + j].to_f64();
                        dx[i * d + j] =
                            S::from_f64((g.data()[i * d + j].to_f64() - dot) * yv);
                    }
                }
                self.add_grad(a, Tensor { shape: y.shape().to_vec(), data: dx });
                self.ops[idx] = op;
            }
            op @ Op::AddRowVec(m, r) => {
                if self.requires[m] {
                    self.add_grad(m, g.clone());
                }
                if self.requires[r] {
                    let (n, d) = (self.vals[m].rows(), self.vals[m].cols());
                    let mut dr = vec![0.0f64; d];
                    for i in 0..n {
                        for j in 0..d {
                            dr[j] += g.data()[i * d + j].to_f64();
                        }
                    }
                    let t = Tensor {
                        shape: self.vals[r].shape().to_vec(),
                        data: dr.iter().map(|&v| S::from_f64(v)).collect(),
                    };
                    self.add_grad(r, t);
                }
                self.ops[idx] = op;
            }
            op @ Op::AddColVec(m, c) => {
                if self.requires[m] {
                    self.add_grad(m, g.clone());
                }
                if self.requires[c] {
                    let (n, d) = (self.vals[m].rows(), self.vals[m].cols());
                    let mut dc = vec![0.0f64; n];
                    for i in 0..n {
                        for j in 0..d {
                            dc[i] += g.data()[i * d + j].to_f64();
                        }
                    }
                    let t = Tensor {
                        shape: self.vals[c].shape().to_vec(),
                        data: dc.iter().map(|&v| S::from_f64(v)).collect(),
                    };
                    self.add_grad(c, t);
                }
                self.ops[idx] = op;
            }
            op @ Op::RowSum(a) => {
                let (n, d) = (self.vals[a].rows(), self.vals[a].cols());
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    let gv = g.data()[i];
                    for j in 0..d {
                        dx[i * d + j] = gv;
                    }
                }
                self.add_grad(a, Tensor { shape: self.vals[a].shape().to_vec(), data: dx });
                self.ops[idx] = op;
            }
            op @ Op::MeanRows(a) => {
                let (n, d) = (self.vals[a].rows(), self.vals[a].cols());
                let inv = S::from_f64(1.0 / n as f64);
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = g.data()[j] * inv;
                    }
                }
                self.add_grad(a, Tensor { shape: self.vals[a].shape().to_vec(), data: dx });
                self.ops[idx] = op;
            }
            op @ Op::SumAll(a) => {
                let gv = g.data()[0];
                let dx = vec![gv; self.vals[a].len()];
                self.add_grad(a, Tensor { shape: self.vals[a].shape().to_vec(), data: dx });
                self.ops[idx] = op;
            }
            op @ Op::Mse(a, b) => {
                let n = self.vals[a].len();
                let k = 2.0 * g.data()[0].to_f64() / n as f64;
                if self.requires[a] || self.requires[b] {
                    let da: Vec<S> = self.vals[a]
                        .iter()
                        .zip(self.vals[b].iter())
                        .map(|(&x, &y)| S::from_f64(k * (x.to_f64() - y.to_f64())))
                        .collect();
                    if self.requires[b] {
                        let db = Tensor {
                            shape: self.vals[b].shape().to_vec(),
                            data: da.iter().map(|&v| -v).collect(),
                        };
                        self.add_grad(b, db);
                    }
                    if self.requires[a] {
                        self.add_grad(
                            a,
                            Tensor { shape: self.vals[a].shape().to_vec(), data: da },
                        );
                    }
                }
                self.ops[idx] = op;
            }
            Op::CrossEntropy { logits, labels } => {
                if self.requires[logits] {
                    let tl = &self.vals[logits];
                    let (n, c) = (tl.rows(), tl.cols());
                    let gv = g.data()[0].to_f64() / n as f64;
                    let mut dx = vec![S::zero(); n * c];
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &tl.data()[i * c..(i + 1) * c];
                        let max =
                            row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j].to_f64() - max).exp() / denom;
                            let target = if j == y { 1.0 } else { 0.0 };
                            dx[i * c + j] = S::from_f64(gv * (p - target));
                        }
                    }
                    self.add_grad(
                        logits,
                        Tensor { shape: self.vals[logits].shape().to_vec(), data: dx },
                    );
                }
                self.ops[idx] = Op::CrossEntropy { logits, labels };
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in &parts {
                    let n = self.vals[p].rows();
                    if self.requires[p] {
                        let data = g.data()[row * cols..(row + n) * cols].to_vec();
                        self.add_grad(
                            p,
                            Tensor { shape: self.vals[p].shape().to_vec(), data },
                        );
                    }
                    row += n;
                }
                self.ops[idx] = Op::ConcatRows(parts);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut col = 0;
                for &p in &parts {
                    let w = self.vals[p].cols();
                    if self.requires[p] {
                        let mut data = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            data.extend_from_slice(
                                &g.data()[i * total + col..i * total + col + w],
                            );
                        }
                        self.add_grad(
                            p,
                            Tensor { shape: self.vals[p].shape().to_vec(), data },
                        );
                    }
                    col += w;
                }
                self.ops[idx] = Op::ConcatCols(parts);
            }
            op @ Op::SliceRows { x, start, end } => {
                if self.requires[x] {
                    let d = self.vals[x].cols();
                    let mut dx = Tensor::zeros(self.vals[x].shape().to_vec());
                    dx.data_mut()[start * d..end * d].copy_from_slice(g.data());
                    self.add_grad(x, dx);
                }
                self.ops[idx] = op;
            }
            op @ Op::SliceCols { x, start, end } => {
                if self.requires[x] {
                    let (n, d) = (self.vals[x].rows(), self.vals[x].cols());
                    let w = end - start;
                    let mut dx = Tensor::zeros(self.vals[x].shape().to_vec());
                    for i in 0..n {
                        dx.data_mut()[i * d + start..i * d + end]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    self.add_grad(x, dx);
                }
                self.ops[idx] = op;
            }
            op @ Op::PairwiseSqdist(a) => {
                if self.requires[a] {
                    let x = &self.vals[a];
                    let (n, d) = (x.rows(), x.cols());
                    let mut dx = vec![0.0f64; n * d];
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = g.data()[i * n + j].to_f64() + g.data()[j * n + i].to_f64();
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = x.data()[i * d + k].to_f64()
                                    - x.data()[j * d + k].to_f64();
                                dx[i * d + k] += w * diff;
                            }
                        }
                    }
                    let t = Tensor {
                        shape: x.shape().to_vec(),
                        data: dx.iter().map(|&v| S::from_f64(2.0 * v)).collect(),
                    };
                    self.add_grad(a, t);
                }
                self.ops[idx] = op;
            }
        }
    }
}

fn ew_mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect(),
    }
}

/// Row-major matmul with an f64 accumulator row.
pub(crate) fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![S::zero(); n * m];
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let av = a.data()[i * k + kk].to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * m..(kk + 1) * m];
            for (j, bv) in brow.iter().enumerate() {
                acc[j] += av * bv.to_f64();
            }
        }
        for j in 0..m {
            out[i * m + j] = S::from_f64(acc[j]);
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

pub(crate) fn transpose_raw<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (n, m) = (a.rows(), a.cols());
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

fn gelu_f64(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_value() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t64(1, 3, &[1., 2., 3.]));
        let b = g.leaf(t64(1, 3, &[10., 20., 30.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11., 22., 33.]);
    }

    #[test]
    fn shape_error_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t64(1, 3, &[1., 2., 3.]));
        let b = g.leaf(t64(1, 2, &[1., 2.]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t64(2, 2, &[1., 2., 3., 4.]));
        let b = g.leaf(t64(2, 2, &[5., 6., 7., 8.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.var(t64(1, 3, &[1., 2., 3.]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // loss = sum(W @ x), x fixed -> dloss/dW = broadcast of x^T rows
        let mut g = Graph::<f64>::new();
        let w = g.var(t64(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let x = g.leaf(t64(3, 1, &[1., 2., 3.]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1., 2., 3., 1., 2., 3.]);
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(1, 1, &[0.0]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t64(2, 2, &[1., -2., 3., 0.5]));
        let b = g.leaf(t64(2, 2, &[1., -2., 3., 0.5]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(1, 4, &[3., 3., 3., 3.]));
        let gamma = g.leaf(t64(1, 4, &[1., 1., 1., 1.]));
        let beta = g.leaf(t64(1, 4, &[0., 0., 0., 0.]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(2, 8, &[1., 9., -3., 4., 2., 0., 7., -5., 3., 3., 4., 8., -1., 2., 6., 0.]));
        let gamma = g.leaf(t64(1, 8, &[1.; 8]));
        let beta = g.leaf(t64(1, 8, &[0.; 8]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for i in 0..2 {
            let row = &g.value(y).data()[i * 8..(i + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(3, 4, &[1., 2., 3., 4., -1., 0., 1., 2., 100., 100., 100., 100.]));
        let y = g.softmax_rows(x);
        for i in 0..3 {
            let s: f64 = g.value(y).data()[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let top = g.slice_rows(x, 0, 1).unwrap();
        let rest = g.slice_rows(x, 1, 3).unwrap();
        let back = g.concat_rows(&[top, rest]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(2, 5, &[0.; 10]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).item() - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn weight_sharing_accumulates_via_param_cache() {
        // p used twice: loss = sum(p) + sum(p) -> grad = 2
        let mut g = Graph::<f64>::new();
        let p1 = g.param_leaf(0, t64(1, 2, &[1., 2.]));
        let p2 = g.param_leaf(0, t64(1, 2, &[9., 9.]));
        assert_eq!(p1, p2, "same key must return the cached node");
        let s1 = g.sum_all(p1);
        let s2 = g.sum_all(p2);
        let tot = g.add(s1, s2).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.grad(p1).unwrap().data(), &[2., 2.]);
    }
}
