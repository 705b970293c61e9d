use std::collections::HashMap;

use super::shape::{broadcast_shape, for_each_broadcast, gemm, numel, swap_axes};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Mean { input: Var, axis: usize },
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    GatedSoftmax { scores: Var, gates: Var, ratio: Vec<f64> },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SwapAxes { input: Var, a: usize, b: usize },
    Reshape(Var),
    EmbedLookup { table: Var, indices: Vec<usize> },
    Bce { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a forward pass. Rebuild one per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every entry of `store`; unreachable parameters get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.params
                    .get(&ParamId(i))
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NumericFault { op: op_name });
        }
        let needs_grad = match &op {
            Op::Constant | Op::Param => false,
            Op::Input => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.needs(*a) || self.needs(*b),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.needs(*p)),
            Op::GatedSoftmax { scores, gates, .. } => self.needs(*scores) || self.needs(*gates),
            Op::LayerNorm { input, gamma, beta, .. } => self.needs(*input) || self.needs(*gamma) || self.needs(*beta),
            Op::Scale(x, _)
            | Op::Slice { input: x, .. }
            | Op::Mean { input: x, .. }
            | Op::Sum(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Softmax(x)
            | Op::SwapAxes { input: x, .. }
            | Op::Reshape(x)
            | Op::EmbedLookup { table: x, .. }
            | Op::Bce { logits: x, .. } => self.needs(*x),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, "constant").unwrap_or_else(|_| panic!("constant tensors must be finite"))
    }

    /// A leaf that receives a gradient (used for input sensitivities and gradient checks).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Records parameter `id` once per tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node { value: p.value.clone(), op: Op::Param, needs_grad: p.trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Copies `v` into a new leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; numel(&out_shape)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            gemm(rows, k, n, da, false, db, false, &mut out, false);
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                gemm(m, k, n, &da[i * m * k..], false, &db[i * k * n..], false, &mut out[i * m * n..], false);
            }
        } else {
            return Err(mismatch("matmul", &sa, &sb));
        }
        self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel(&out_shape)];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |i, ia, ib| {
            out[i] = f(da[ia], db[ib]);
        });
        self.push(Tensor::new(out_shape, out)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *parts.first().ok_or_else(|| TensorError::InvalidArgument { op: "concat", msg: "no inputs".into() })?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(Tensor::new(out_shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(out_shape, out)?, Op::Slice { input: a, axis, start }, "slice")
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::InvalidArgument { op: "mean", msg: format!("axis {axis} of {shape:?}") });
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / dim as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(Tensor::new(out_shape, out)?, Op::Mean { input: a, axis }, "mean")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| TensorError::InvalidArgument { op: "softmax", msg: "scalar input".into() })?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a), "softmax")
    }

    /// Softmax over the last axis with a non-negative prior weight per key:
    /// `y_j = w_j e^{s_j} / Σ_k w_k e^{s_k}`. `gates` has the last-axis length.
    ///
    /// A zero weight removes a key from the normalization exactly while keeping
    /// a nonzero gradient with respect to that weight.
    pub fn gated_softmax(&mut self, scores: Var, gates: Var) -> Result<Var> {
        let (t, g) = (self.value(scores), self.value(gates));
        let cols = *t.shape().last().unwrap_or(&0);
        if g.shape() != [cols] {
            return Err(mismatch("gated_softmax", t.shape(), g.shape()));
        }
        let gw = g.data();
        let mut out = t.data().to_vec();
        let mut ratio = vec![0.0; out.len()];
        for (row, rrow) in out.chunks_mut(cols).zip(ratio.chunks_mut(cols)) {
            let mut m = row.iter().zip(gw).filter(|(_, &w)| w > 0.0).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            let mut z = 0.0;
            for ((v, r), w) in row.iter_mut().zip(rrow.iter_mut()).zip(gw) {
                *r = (*v - m).exp();
                z += w * *r;
            }
            if z <= 0.0 {
                return Err(TensorError::NumericFault { op: "gated_softmax" });
            }
            for ((v, r), w) in row.iter_mut().zip(rrow.iter_mut()).zip(gw) {
                *r /= z;
                *v = w * *r;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::GatedSoftmax { scores, gates, ratio }, "gated_softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&0);
        let (g, b) = (self.value(gamma), self.value(beta));
        if d == 0 || g.shape() != [d] || b.shape() != [d] {
            return Err(mismatch("layer_norm", t.shape(), g.shape()));
        }
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { input: x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let t = self.value(x);
        if a >= t.ndim() || b >= t.ndim() {
            return Err(TensorError::InvalidArgument {
                op: "swap_axes",
                msg: format!("axes ({a}, {b}) of {:?}", t.shape()),
            });
        }
        let (data, shape) = swap_axes(t.data(), t.shape(), a, b);
        self.push(Tensor::new(shape, data)?, Op::SwapAxes { input: x, a, b }, "swap_axes")
    }

    /// Exchanges the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).ndim();
        if n < 2 {
            return Err(TensorError::InvalidArgument { op: "transpose", msg: format!("needs ≥ 2 axes, got {n}") });
        }
        self.swap_axes(x, n - 2, n - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Gathers rows of a 2-D `table`.
    pub fn embed_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(mismatch("embed_lookup", t.shape(), &[indices.len()]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::InvalidArgument { op: "embed_lookup", msg: format!("index {i} ≥ {rows}") });
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::EmbedLookup { table, indices: indices.to_vec() },
            "embed_lookup",
        )
    }

    /// Mean binary cross-entropy on logits, `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", z.shape(), targets.shape()));
        }
        if z.is_empty() {
            return Err(TensorError::InvalidArgument { op: "bce_with_logits", msg: "empty input".into() });
        }
        let total: f64 =
            z.data().iter().zip(targets.data()).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum();
        let loss = total / z.len() as f64;
        self.push(Tensor::scalar(loss), Op::Bce { logits, targets: targets.data().to_vec() }, "bce_with_logits")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast-shaped gradient back down to `shape`.
    fn reduce_to(out_shape: &[usize], g: &[f64], shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let mut acc = vec![0.0; numel(shape)];
        for_each_broadcast(out_shape, shape, out_shape, |i, ia, _| {
            acc[ia] += g[i] * f(i);
        });
        Tensor { shape: shape.to_vec(), data: acc }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                if sb.len() == 2 {
                    let rows = numel(&sa[..sa.len() - 1]);
                    if self.needs(*a) {
                        let mut ga = vec![0.0; ta.len()];
                        gemm(rows, n, k, gd, false, tb.data(), true, &mut ga, false);
                        self.accumulate(grads, *a, Tensor::new(sa.to_vec(), ga)?);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; tb.len()];
                        gemm(k, rows, n, ta.data(), true, gd, false, &mut gb, false);
                        self.accumulate(grads, *b, Tensor::new(sb.to_vec(), gb)?);
                    }
                } else {
                    let batch = numel(&sa[..sa.len() - 2]);
                    if self.needs(*a) {
                        let mut ga = vec![0.0; ta.len()];
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[bi * m * n..],
                                false,
                                &tb.data()[bi * k * n..],
                                true,
                                &mut ga[bi * m * k..],
                                false,
                            );
                        }
                        self.accumulate(grads, *a, Tensor::new(sa.to_vec(), ga)?);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; tb.len()];
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[bi * m * k..],
                                true,
                                &gd[bi * m * n..],
                                false,
                                &mut gb[bi * k * n..],
                                false,
                            );
                        }
                        self.accumulate(grads, *b, Tensor::new(sb.to_vec(), gb)?);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    let ga = Self::reduce_to(out.shape(), gd, self.value(*a).shape(), |_| 1.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = Self::reduce_to(out.shape(), gd, self.value(*b).shape(), |_| sign);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                // Materialize each operand at the output shape, then reduce.
                let expand = |t: &Tensor| {
                    let mut e = vec![0.0; out.len()];
                    for_each_broadcast(out.shape(), t.shape(), out.shape(), |i, it, _| {
                        e[i] = t.data()[it];
                    });
                    e
                };
                if self.needs(*a) {
                    let eb = expand(tb);
                    let ga = Self::reduce_to(out.shape(), gd, ta.shape(), |i| eb[i]);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let ea = expand(ta);
                    let gb = Self::reduce_to(out.shape(), gd, tb.shape(), |i| ea[i]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for &p in parts {
                    let s = self.value(p).shape();
                    let chunk = s[*axis] * inner;
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gp.extend_from_slice(&gd[base..base + chunk]);
                        }
                        self.accumulate(grads, p, Tensor::new(s.to_vec(), gp)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.value(*input).shape();
                let (outer, dim, inner) = split_at_axis(shape, *axis);
                let len = out.shape()[*axis];
                let mut gi = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(shape.to_vec(), gi)?);
            }
            Op::Mean { input, axis } => {
                let shape = self.value(*input).shape();
                let (outer, dim, inner) = split_at_axis(shape, *axis);
                let inv = 1.0 / dim as f64;
                let mut gi = vec![0.0; numel(shape)];
                for o in 0..outer {
                    for d in 0..dim {
                        let dst = (o * dim + d) * inner;
                        for j in 0..inner {
                            gi[dst + j] = gd[o * inner + j] * inv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(shape.to_vec(), gi)?);
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(s, gd[0]));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let gi: Vec<f64> = x.data().iter().zip(gd).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gi)?);
            }
            Op::Sigmoid(a) => {
                let gi: Vec<f64> = out.data().iter().zip(gd).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), gi)?);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let gi: Vec<f64> = x.data().iter().zip(gd).map(|(&x, &g)| g * sigmoid(x)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gi)?);
            }
            Op::Softmax(a) => {
                let cols = *out.shape().last().unwrap_or(&1);
                let mut gi = vec![0.0; out.len()];
                for ((y, gr), dst) in out.data().chunks(cols).zip(gd.chunks(cols)).zip(gi.chunks_mut(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dst[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), gi)?);
            }
            Op::GatedSoftmax { scores, gates, ratio } => {
                let cols = *out.shape().last().unwrap_or(&1);
                let mut gs = vec![0.0; out.len()];
                let mut gg = vec![0.0; cols];
                for (((y, gr), r), dst) in
                    out.data().chunks(cols).zip(gd.chunks(cols)).zip(ratio.chunks(cols)).zip(gs.chunks_mut(cols))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dst[j] = y[j] * (gr[j] - dot);
                        gg[j] += r[j] * (gr[j] - dot);
                    }
                }
                if self.needs(*scores) {
                    self.accumulate(grads, *scores, Tensor::new(out.shape().to_vec(), gs)?);
                }
                if self.needs(*gates) {
                    self.accumulate(grads, *gates, Tensor::new(vec![cols], gg)?);
                }
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let d = *out.shape().last().unwrap_or(&1);
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; out.len()];
                let mut ggam = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gy = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..d {
                        let gxh = gy[j] * gam[j];
                        mean_g += gxh;
                        mean_gx += gxh * xh[j];
                        ggam[j] += gy[j] * xh[j];
                        gbeta[j] += gy[j];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for j in 0..d {
                        let gxh = gy[j] * gam[j];
                        gx[r * d + j] = is * (gxh - mean_g - xh[j] * mean_gx);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(out.shape().to_vec(), gx)?);
                self.accumulate(grads, *gamma, Tensor::new(vec![d], ggam)?);
                self.accumulate(grads, *beta, Tensor::new(vec![d], gbeta)?);
            }
            Op::SwapAxes { input, a, b } => {
                let (data, shape) = swap_axes(gd, out.shape(), *a, *b);
                self.accumulate(grads, *input, Tensor::new(shape, data)?);
            }
            Op::Reshape(a) => {
                let s = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(s)?);
            }
            Op::EmbedLookup { table, indices } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut gt = vec![0.0; t.len()];
                for (row, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] += gd[row * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(t.shape().to_vec(), gt)?);
            }
            Op::Bce { logits, targets } => {
                let z = self.value(*logits);
                let scale = gd[0] / z.len() as f64;
                let gi: Vec<f64> = z.data().iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) * scale).collect();
                self.accumulate(grads, *logits, Tensor::new(z.shape().to_vec(), gi)?);
            }
        }
        Ok(())
    }
}
