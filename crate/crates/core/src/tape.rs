//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an arena: every forward op appends a node holding its
//! output value and, when any input requires a gradient, the op kind plus
//! whatever the backward rule needs. Insertion order is a topological
//! order, so [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use mmdl_core::tape::Graph;
//! use mmdl_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = g.constant(Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap());
//! let xy = g.mul(x, y).unwrap();
//! let loss = g.sum_all(xy);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum MatKind {
    /// `a: [.., m, k]`, `b: [k, n]`.
    Shared,
    /// `a: [batch.., m, k]`, `b: [batch.., k, n]`.
    Batched,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, MatKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var, usize),
    Mean(Var, usize),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Log { x: Var, floor: f64 },
    Embedding { table: Var, indices: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b, _) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Slice { x, .. }
            | Op::Sum(x, _)
            | Op::Mean(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Log { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape. See the module docs.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph: [`Graph::param`] leaves require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
            backward_done: false,
        }
    }

    /// A graph that never records backward information. Used for frozen
    /// teachers and evaluation.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.record;
        self.leaf(value, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(!finite_inputs, "non-finite output from finite inputs in {op:?}");
        }
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::dim("matmul", &sa, &sb);
        if sa.is_empty() || sb.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            let n = sb[1];
            if sb[0] != k {
                return Err(err());
            }
            let m = numel(&sa) / k;
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let t = Tensor::new(&shape, out)?;
            return Ok(self.push(t, Op::MatMul(a, b, MatKind::Shared)));
        }
        let r = sa.len();
        if r != sb.len() || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
            return Err(err());
        }
        let (m, n) = (sa[r - 2], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                (n, 1),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b, MatKind::Batched)))
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let map = Broadcast::new(ta.shape(), tb.shape()).ok_or_else(|| Error::dim(op, ta.shape(), tb.shape()))?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; da.len()];
        map.for_each(|i, j| out[i] = f(da[i], db[j]));
        Tensor::new(ta.shape(), out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let tx = self.value(x);
        Tensor::new(tx.shape(), tx.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", tx.shape(), perm));
        }
        let (data, shape) = permute_data(tx.data(), tx.shape(), perm);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Permute(x, perm.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let r = self.value(x).rank();
        if a1 >= r || a2 >= r {
            return Err(Error::dim("transpose", self.shape(x), &[a1, a2]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(a1, a2);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::contract("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis)))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("slice", s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce(x, axis, 1.0)?;
        Ok(self.push(t, Op::Sum(x, axis)))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| Error::dim("mean", self.shape(x), &[axis]))?;
        let t = self.reduce(x, axis, 1.0 / len as f64)?;
        Ok(self.push(t, Op::Mean(x, axis)))
    }

    fn reduce(&self, x: Var, axis: usize, factor: f64) -> Result<Tensor> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() {
            return Err(Error::dim("reduce", s, &[axis]));
        }
        let (outer, len, inner) = split3(s, axis);
        let mut out = vec![0.0; outer * inner];
        let d = tx.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            dst.iter_mut().for_each(|a| *a *= factor);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        Tensor::new(&shape, out)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n]).expect("flat reshape");
        self.sum(flat, 0).expect("axis 0 exists")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 0.5 * v * (1.0 + libm::tanh(GELU_C * (v + GELU_A * v * v * v))));
        self.push(t, Op::Gelu(x))
    }

    /// Normalizes each last-axis slice to zero mean and unit population
    /// variance (eps = [`LAYER_NORM_EPS`]), then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| Error::dim("layer_norm", tx.shape(), &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), self.shape(gamma)));
        }
        let rows = tx.numel() / d;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gd[i] + bd[i];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.lastdim(x, "softmax", |row, out| softmax_row(row, out))?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.lastdim(x, "log_softmax", |row, out| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            out.iter_mut().zip(row).for_each(|(o, v)| *o = v - lse);
        })?;
        Ok(self.push(t, Op::LogSoftmax(x)))
    }

    fn lastdim(&self, x: Var, op: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        let tx = self.value(x);
        let c = *tx.shape().last().ok_or_else(|| Error::dim(op, tx.shape(), &[]))?;
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN input to {op}")));
        }
        let mut out = vec![0.0; tx.numel()];
        for (row, o) in tx.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            f(row, o);
        }
        Tensor::new(tx.shape(), out)
    }

    /// `ln(max(x, floor))`; the gradient is zero wherever the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let t = self.map(x, |v| libm::log(v.max(floor)));
        self.push(t, Op::Log { x, floor })
    }

    /// Gathers rows of `table: [V, d]`, producing `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || indices.is_empty() {
            return Err(Error::dim("embedding", tt.shape(), &[indices.len()]));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("embedding index {bad} out of range {v}")));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[indices.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity when `p == 0` or the graph is not recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 || !self.record {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect()).unwrap();
        self.push(t, Op::Dropout { x, mask })
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without reset_grads"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::contract("loss does not depend on any trainable leaf"));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            apply_backward(nodes, grads, i, g);
        }
        Ok(())
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = libm::exp(v - m);
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Gradient buffer for `v`, created zeroed on first use, or `None` when
/// `v` does not require a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Adds `g` into the gradient of `v`, taking ownership of the buffer when
/// `v` has none yet.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(dst) => dst.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        none => *none = Some(g),
    }
}

fn apply_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g_owned: Vec<f64>) {
    let out = &nodes[i].value;
    let g = &g_owned[..];
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b, kind) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let k = *ta.shape().last().unwrap();
            let n = *out.shape().last().unwrap();
            match kind {
                MatKind::Shared => {
                    let m = ta.numel() / k;
                    if let Some(ga) = slot(nodes, grads, *a) {
                        gemm(m, n, k, g, (n, 1), tb.data(), (1, n), ga, 1.0);
                    }
                    if let Some(gb) = slot(nodes, grads, *b) {
                        gemm(k, m, n, ta.data(), (1, k), g, (n, 1), gb, 1.0);
                    }
                }
                MatKind::Batched => {
                    let r = ta.rank();
                    let m = ta.shape()[r - 2];
                    let batch = ta.numel() / (m * k);
                    if let Some(ga) = slot(nodes, grads, *a) {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n, 1),
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                (1, n),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                (1, k),
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n, 1),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                1.0,
                            );
                        }
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(gb) = slot(nodes, grads, *b) {
                let map = Broadcast::new(nodes[a.0].value.shape(), nodes[b.0].value.shape()).unwrap();
                map.for_each(|ai, bi| gb[bi] += sign * g[ai]);
            }
            accumulate(nodes, grads, *a, g_owned);
        }
        Op::Mul(a, b) => {
            let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let map = Broadcast::new(nodes[a.0].value.shape(), nodes[b.0].value.shape()).unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                map.for_each(|ai, bi| ga[ai] += g[ai] * db[bi]);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                map.for_each(|ai, bi| gb[bi] += g[ai] * da[ai]);
            }
        }
        Op::Scale(x, c) => {
            let mut g_owned = g_owned;
            g_owned.iter_mut().for_each(|v| *v *= c);
            accumulate(nodes, grads, *x, g_owned);
        }
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, g_owned),
        Op::Permute(x, perm) => {
            if nodes[x.0].requires_grad {
                let mut inv = vec![0; perm.len()];
                perm.iter().enumerate().for_each(|(i, &p)| inv[p] = i);
                let (back, _) = permute_data(g, out.shape(), &inv);
                accumulate(nodes, grads, *x, back);
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split3(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for x in xs {
                let len = nodes[x.0].value.shape()[*axis];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gx[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let full = nodes[x.0].value.shape()[*axis];
            let len = out.shape()[*axis];
            let (outer, _, inner) = split3(out.shape(), *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Sum(x, axis) | Op::Mean(x, axis) => {
            let shape = nodes[x.0].value.shape();
            let (outer, len, inner) = split3(shape, *axis);
            let factor = if matches!(nodes[i].op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += factor * b);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let dx = nodes[x.0].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, &v), &gi) in gx.iter_mut().zip(dx).zip(g) {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = libm::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *a += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gd = nodes[gamma.0].value.data();
            let d = gd.len();
            let rows = rstd.len();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gd[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let c = *out.shape().last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((y, gy), dst) in out.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let c = *out.shape().last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((y, gy), dst) in out.data().chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    let total: f64 = gy.iter().sum();
                    for j in 0..c {
                        dst[j] += gy[j] - libm::exp(y[j]) * total;
                    }
                }
            }
        }
        Op::Log { x, floor } => {
            let dx = nodes[x.0].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, &v), &gi) in gx.iter_mut().zip(dx).zip(g) {
                    if v > *floor {
                        *a += gi / v;
                    }
                }
            }
        }
        Op::Embedding { table, indices } => {
            let d = nodes[table.0].value.shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (row, &idx) in indices.iter().enumerate() {
                    let dst = &mut gt[idx * d..(idx + 1) * d];
                    dst.iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, m), gi) in gx.iter_mut().zip(mask).zip(g) {
                    *a += m * gi;
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `c: [m, n]`; `a` and `b` are given with
/// explicit (row, column) strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every offset dgemm can touch, and `c`
    // cannot alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let r = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if r == 0 {
        return (data.to_vec(), out_shape);
    }
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    // Runs along the last output axis are contiguous when it is also the
    // last input axis.
    let last = out_shape[r - 1];
    let contiguous = perm[r - 1] == r - 1;
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    loop {
        if contiguous {
            out.extend_from_slice(&data[base..base + last]);
        } else {
            let st = src_strides[r - 1];
            out.extend((0..last).map(|j| data[base + j * st]));
        }
        let mut ax = r - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Index map from elements of `a` to elements of a right-aligned `b`
/// broadcast to `a`'s shape.
struct Broadcast {
    shape: Vec<usize>,
    b_strides: Vec<usize>,
    /// `b` repeats contiguously every `b_len` elements of `a`.
    tiled: Option<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        if b.len() > a.len() {
            return None;
        }
        let off = a.len() - b.len();
        let bs = strides(b);
        let mut b_strides = vec![0; a.len()];
        for (j, (&db, &st)) in b.iter().zip(&bs).enumerate() {
            let da = a[off + j];
            if db == da {
                b_strides[off + j] = if db == 1 { 0 } else { st };
            } else if db != 1 {
                return None;
            }
        }
        let first_real = b.iter().position(|&d| d != 1).unwrap_or(b.len());
        let tiled = (b[first_real..] == a[off + first_real..]).then(|| numel(b));
        Some(Broadcast {
            shape: a.to_vec(),
            b_strides,
            tiled,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n = numel(&self.shape);
        if let Some(bl) = self.tiled {
            for base in (0..n).step_by(bl.max(1)) {
                for j in 0..bl {
                    f(base + j, j);
                }
            }
            return;
        }
        let r = self.shape.len();
        let last = self.shape[r - 1];
        let sl = self.b_strides[r - 1];
        let mut idx = vec![0usize; r - 1];
        let (mut ai, mut bbase) = (0usize, 0usize);
        loop {
            for j in 0..last {
                f(ai + j, bbase + j * sl);
            }
            ai += last;
            let mut ax = r - 1;
            loop {
                if ax == 0 {
                    return;
                }
                ax -= 1;
                idx[ax] += 1;
                bbase += self.b_strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                bbase -= self.b_strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, v).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);

        let z1 = g.constant(Tensor::zeros(&[3, 4]));
        let z2 = g.constant(Tensor::zeros(&[4, 2]));
        let c = g.matmul(z1, z2).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let p = g.softmax(z).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let p = g.softmax(z).unwrap();
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in g.value(p).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
        let nan = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros).unwrap();
        // eps = 1e-5 shifts the exact [-1, 1] by about 5e-6.
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-5);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-5);

        let c = g.constant(Tensor::full(&[2], 7.0));
        let y = g.layer_norm(c, ones, zeros).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let beta = g.constant(t(&[2], &[0.25, -2.0]));
        let y = g.layer_norm(x, zeros, beta).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -2.0]);
    }

    #[test]
    fn bilinear_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]));
        let y = g.constant(t(&[2, 2], &[3.0, 1.0, -4.0, 0.25]));
        let p = g.mul(x, y).unwrap();
        let l = g.sum_all(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), g.value(y).data());
    }

    #[test]
    fn fan_out_doubles_gradient() {
        let w = t(&[3], &[0.5, -1.0, 2.0]);
        let grad_of = |uses: usize| {
            let mut g = Graph::new();
            let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
            let wv = g.constant(w.clone());
            let mut acc = g.mul(x, wv).unwrap();
            for _ in 1..uses {
                let again = g.mul(x, wv).unwrap();
                acc = g.add(acc, again).unwrap();
            }
            let l = g.sum_all(acc);
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let once = grad_of(1);
        let twice = grad_of(2);
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::inference();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let l = g.sum_all(x);
        assert!(!g.requires_grad(l));
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn broadcast_add_with_inner_singleton() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let b = g.param(t(&[3, 1], &[10.0, 20.0, 30.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(
            g.value(c).data(),
            &[10.0, 11.0, 22.0, 23.0, 34.0, 35.0, 16.0, 17.0, 28.0, 29.0, 40.0, 41.0]
        );
        let l = g.sum_all(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        let ty = g.value(y);
        assert_eq!(ty.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(ty.at(&[k, i, j]), g.value(x).at(&[i, j, k]));
                }
            }
        }
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let back = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }
}
