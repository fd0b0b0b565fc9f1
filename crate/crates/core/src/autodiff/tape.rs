//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar consumes the tape and returns gradients for
//! every parameter and gradient-tracking leaf that reaches the loss.

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the right operand of a binary op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand has the length of the left operand's last dimension.
    Row,
    /// Right operand holds a single element.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<F>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        src: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        x: Var,
        y: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    params: BTreeMap<ParamId, Tensor<F>>,
    nodes: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<F>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<F>> {
        self.params
    }

    /// Gradient with respect to any node, e.g. an input created by [`Tape::var`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(Bcast::Same);
    }
    if nb == 1 {
        return Ok(Bcast::Scalar);
    }
    let last = a.last().copied().unwrap_or(1);
    if nb == last && na.is_multiple_of(last) && b.iter().rev().skip(1).all(|&d| d == 1) {
        return Ok(Bcast::Row);
    }
    Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
}

#[inline]
fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let one = F::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (one + F::of(3.0) * k * x * x);
    let v = half * x * (one + t);
    let d = half * (one + t) + half * x * (one - t * t) * du;
    (v, d)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> Result<F> {
        self.value(v).item()
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn var(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), tracked))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
        }
        let data = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMulNT(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a), tracked))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = bcast_kind(name, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let cols = ta.cols().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Bcast::Same => bd[i],
                    Bcast::Row => bd[i % cols],
                    Bcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::from_parts(ta.shape().to_vec(), data), kind))
    }

    /// Elementwise sum; `b` may be a scalar or a vector over `a`'s last dim.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b, k), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b, k), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b, k), tracked))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let t = self.value(a).map(|x| x * k);
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, k), tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let t = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(t, op, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols().max(1);
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let tracked = self.tracked(a);
        self.push(t, Op::Softmax(a), tracked)
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let src = self.value(a);
        let cols = src.cols().max(1);
        let n = F::of(cols as f64);
        let mut data = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let tracked = self.tracked(a);
        self.push(t, Op::LayerNorm { x: a, inv_std }, tracked)
    }

    /// Scales each row to unit Euclidean norm (rows with norm below `eps`
    /// are divided by `eps`).
    pub fn l2_normalize(&mut self, a: Var, eps: F) -> Var {
        let src = self.value(a);
        let cols = src.cols().max(1);
        let mut data = src.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let nrm = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(eps);
            for x in row.iter_mut() {
                *x /= nrm;
            }
            norms.push(nrm);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let tracked = self.tracked(a);
        self.push(t, Op::L2Normalize { x: a, norms }, tracked)
    }

    /// Concatenation of vectors (axis 0) or matrices along axis 0 or 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = self.shape(first).len();
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let t = match (rank, axis) {
            (1, 0) | (2, 0) => {
                let tail = self.shape(first)[1..].to_vec();
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != rank || s[1..] != tail[..] {
                        return Err(Error::shape("concat", format!("{s:?} vs {:?}", self.shape(first))));
                    }
                    rows += s[0];
                    data.extend_from_slice(self.value(p).data());
                }
                let mut shape = vec![rows];
                shape.extend(tail);
                Tensor::from_parts(shape, data)
            }
            (2, 1) => {
                let m = self.shape(first)[0];
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != m {
                        return Err(Error::shape("concat", format!("{s:?} vs {:?}", self.shape(first))));
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for i in 0..m {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::from_parts(vec![m, total], data)
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} on rank {rank}"))),
        };
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Rows `ids` of a matrix, in order (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("gather_rows", src)?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::VocabOverflow { index: i, size: rows });
            }
            data.extend_from_slice(&self.value(src).data()[i * cols..(i + 1) * cols]);
        }
        let tracked = self.tracked(src);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], data),
            Op::GatherRows { src, ids: ids.to_vec() },
            tracked,
        ))
    }

    /// Rows of an embedding table selected by token or class id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", src)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {n} columns")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.value(src).data()[i * n + start..i * n + end]);
        }
        let tracked = self.tracked(src);
        Ok(self.push(
            Tensor::from_parts(vec![m, w], data),
            Op::SliceCols { src, start },
            tracked,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::Reshape(a), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(t, Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / F::of(v.len().max(1) as f64));
        let tracked = self.tracked(a);
        self.push(t, Op::Mean(a), tracked)
    }

    /// Mean binary cross-entropy between logits `x` and 0/1 targets `y`,
    /// `max(x,0) - x*y + ln(1 + e^-|x|)` per element.
    pub fn bce_with_logits(&mut self, x: Var, y: &Tensor<F>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != y.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs targets {:?}", xv.shape(), y.shape()),
            ));
        }
        if y.data().iter().any(|&t| t != F::zero() && t != F::one()) {
            return Err(Error::NonBinaryTarget);
        }
        let n = F::of(xv.len().max(1) as f64);
        let total: F = xv
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &t)| a.max(F::zero()) - a * t + softplus(-a.abs()))
            .sum();
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                x,
                y: y.data().to_vec(),
            },
            tracked,
        ))
    }

    /// Mean softmax cross-entropy. `logits` is `[n x C]` with one target per
    /// row, or a vector treated as a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = match lv.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => return Err(Error::shape("cross_entropy", format!("logits {s:?}"))),
        };
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::shape("cross_entropy", format!("target {t} with {cols} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = F::zero();
        for (row, &t) in probs.chunks_mut(cols).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let value = total / F::of(rows.max(1) as f64);
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&loss_shape, F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.insert(*id, g.clone());
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn reduce_bcast(&self, g: &Tensor<F>, b: Var, kind: Bcast, f: impl Fn(F, usize) -> F) -> Tensor<F> {
        let bshape = self.shape(b).to_vec();
        match kind {
            Bcast::Same => {
                let data = g.data().iter().enumerate().map(|(i, &x)| f(x, i)).collect();
                Tensor::from_parts(bshape, data)
            }
            Bcast::Row => {
                let cols = g.cols().max(1);
                let mut out = vec![F::zero(); cols];
                for (i, &x) in g.data().iter().enumerate() {
                    out[i % cols] += f(x, i);
                }
                Tensor::from_parts(bshape, out)
            }
            Bcast::Scalar => {
                let s = g.data().iter().enumerate().map(|(i, &x)| f(x, i)).sum();
                Tensor::from_parts(bshape, vec![s])
            }
        }
    }

    fn bval(&self, b: Var, kind: Bcast, i: usize, cols: usize) -> F {
        let d = self.value(b).data();
        match kind {
            Bcast::Same => d[i],
            Bcast::Row => d[i % cols],
            Bcast::Scalar => d[0],
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.tracked(*a) {
                    let da = gemm_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.tracked(*b) {
                    let db = gemm_tn(self.value(*a).data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.tracked(*a) {
                    let da = gemm(g.data(), self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.tracked(*b) {
                    let db = gemm_tn(g.data(), self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g.data()[j * m + i];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], d));
            }
            Op::Add(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*b) {
                    let db = self.reduce_bcast(g, *b, *kind, |x, _| x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*b) {
                    let db = self.reduce_bcast(g, *b, *kind, |x, _| -x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b, kind) => {
                let cols = self.value(*a).cols().max(1);
                if self.tracked(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * self.bval(*b, *kind, i, cols))
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), data));
                }
                if self.tracked(*b) {
                    let av = self.value(*a).data();
                    let db = self.reduce_bcast(g, *b, *kind, |x, i| x * av[i]);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.map(|x| x * *k));
            }
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&d, &x)| if x > F::zero() { d } else { F::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &s)| d * s * (F::one() - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Tanh(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &t)| d * (F::one() - t * t))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Gelu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&d, &x)| d * gelu_parts(x).1)
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Softmax(a) => {
                let cols = out.cols().max(1);
                let mut data = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: F = yr.iter().zip(gr).map(|(&y, &d)| y * d).sum();
                    data.extend(yr.iter().zip(gr).map(|(&y, &d)| y * (d - dot)));
                }
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = out.cols().max(1);
                let n = F::of(cols as f64);
                let mut data = Vec::with_capacity(out.len());
                for ((xh, gr), &inv) in out.data().chunks(cols).zip(g.data().chunks(cols)).zip(inv_std) {
                    let mean_g = gr.iter().copied().sum::<F>() / n;
                    let mean_gx = xh.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>() / n;
                    data.extend(xh.iter().zip(gr).map(|(&a, &b)| inv * (b - mean_g - a * mean_gx)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::L2Normalize { x, norms } => {
                let cols = out.cols().max(1);
                let src = self.value(*x).data();
                let mut data = Vec::with_capacity(out.len());
                for (r, (yr, gr)) in out.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                    let nrm = norms[r];
                    let raw: F = src[r * cols..(r + 1) * cols].iter().map(|&v| v * v).sum::<F>().sqrt();
                    if raw < nrm {
                        // clamped by eps: plain scaling
                        data.extend(gr.iter().map(|&d| d / nrm));
                    } else {
                        let dot: F = yr.iter().zip(gr).map(|(&y, &d)| y * d).sum();
                        data.extend(yr.iter().zip(gr).map(|(&y, &d)| (d - y * dot) / nrm));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let piece = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), piece));
                    }
                } else {
                    let m = out.shape()[0];
                    let total = out.shape()[1];
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        let mut piece = Vec::with_capacity(m * w);
                        for i in 0..m {
                            piece.extend_from_slice(&g.data()[i * total + start..i * total + start + w]);
                        }
                        start += w;
                        self.accumulate(grads, p, Tensor::from_parts(vec![m, w], piece));
                    }
                }
            }
            Op::GatherRows { src, ids } => {
                let shape = self.shape(*src).to_vec();
                let cols = shape[1];
                let mut d = vec![F::zero(); shape[0] * cols];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..cols {
                        d[i * cols + j] += g.data()[r * cols + j];
                    }
                }
                self.accumulate(grads, *src, Tensor::from_parts(shape, d));
            }
            Op::SliceCols { src, start } => {
                let shape = self.shape(*src).to_vec();
                let (m, n) = (shape[0], shape[1]);
                let w = out.shape()[1];
                let mut d = vec![F::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *src, Tensor::from_parts(shape, d));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gs));
            }
            Op::Mean(a) => {
                let n = F::of(self.value(*a).len().max(1) as f64);
                let gs = g.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gs));
            }
            Op::BceWithLogits { x, y } => {
                let xv = self.value(*x);
                let scale = g.data()[0] / F::of(xv.len().max(1) as f64);
                let data = xv
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&a, &t)| (sigmoid(a) - t) * scale)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let shape = self.shape(*logits).to_vec();
                let cols = *shape.last().unwrap_or(&1);
                let scale = g.data()[0] / F::of(targets.len().max(1) as f64);
                let mut d: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(shape, d));
            }
        }
    }
}

fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<F>().ln()
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
