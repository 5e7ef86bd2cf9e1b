//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every intermediate produced during one forward pass. Ops
//! return [`Var`] handles (indices into the tape); [`Tape::backward`] walks the
//! nodes in reverse construction order, which is always a valid topological
//! order because a node can only reference nodes created before it.
//!
//! Named leaves registered through [`Tape::param`] are deduplicated by name so
//! a parameter used in several places accumulates a single gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    /// `big` has the output shape; `small` is broadcast over trailing dims.
    /// `swapped` records that the small operand was the left argument.
    Binary {
        kind: BinaryKind,
        big: Var,
        small: Var,
        swapped: bool,
    },
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumLast(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    NormalizeRows(Var),
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Op-specific saved state (layer-norm inverse std, row norms).
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn suffix_broadcastable(big: &[usize], small: &[usize]) -> bool {
    let numel: usize = small.iter().product();
    if numel == 1 {
        return true;
    }
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if k == 0 || n == 0 {
        return out;
    }
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Four interleaved partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if k == 0 || n == 0 {
        return out;
    }
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *o = dot(arow, brow);
        }
    }
    out
}

/// `aᵀ · b` for `a: m×k`, `b: m×n`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if k == 0 || n == 0 {
        return out;
    }
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.named.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_aux(value, op, needs_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, needs_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, needs)
    }

    /// Named leaf, recorded once per tape. Later calls with the same name
    /// return the existing handle.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n, k2) = match (sa, sb) {
            ([m, k], [n, k2]) => (*m, *k, *n, *k2),
            _ => return Err(Error::dim("matmul_nt", sa, sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let data = transpose_raw(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), g))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let (big, small, swapped) = if sa == sb || (na >= nb && suffix_broadcastable(&sa, &sb)) {
            (a, b, false)
        } else if suffix_broadcastable(&sb, &sa) {
            (b, a, true)
        } else {
            return Err(Error::dim("elementwise", &sa, &sb));
        };
        let bv = self.value(big).data();
        let sv = self.value(small).data();
        let ns = sv.len();
        let f = |x: f64, y: f64| match (kind, swapped) {
            (BinaryKind::Add, _) => x + y,
            (BinaryKind::Mul, _) => x * y,
            (BinaryKind::Sub, false) => x - y,
            (BinaryKind::Sub, true) => y - x,
        };
        let mut data = Vec::with_capacity(bv.len());
        if ns == 1 {
            data.extend(bv.iter().map(|&x| f(x, sv[0])));
        } else {
            for chunk in bv.chunks_exact(ns) {
                data.extend(chunk.iter().zip(sv).map(|(&x, &y)| f(x, y)));
            }
        }
        let value = Tensor::new(self.shape(big).to_vec(), data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                big,
                small,
                swapped,
            },
            g,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * c);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        if !src.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let n = shape.get(axis).copied().unwrap_or(1);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
        let xs = src.data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xs[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (xs[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, g))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::Numeric("log_softmax input is not finite".into()));
        }
        let n = last_dim(src.shape());
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), g))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Tensor::from_fn(src.shape(), |i| {
            let v = src.data()[i];
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        });
        let g = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i].tanh());
        let g = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), g)
    }

    /// Normalizes each last-axis row to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let n = last_dim(src.shape());
        let mut out = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        let g = self.any_grad(&[x]);
        self.push_aux(value, Op::LayerNorm(x), g, inv_std)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let total = src.data().iter().sum::<f64>() / src.numel() as f64;
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Mean(x), g)
    }

    /// Mean over rows of an `n × d` matrix, giving a `[d]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in src.chunks(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), g))
    }

    /// Sums the last axis away: `n × d → [n]`, `[d] → []`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let shape = src.shape();
        let n = last_dim(shape);
        let data: Vec<f64> = src.data().chunks(n).map(|r| r.iter().sum()).collect();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let value = Tensor::new(out_shape, data).expect("shape preserved");
        let g = self.any_grad(&[x]);
        self.push(value, Op::SumLast(x), g)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape.first().copied().unwrap_or(1);
        if start >= end || end > rows {
            return Err(Error::dim("slice_rows", &shape, &[start, end]));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * stride..end * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let value = Tensor::new(out_shape, data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, g))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, end]));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![r, w], data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, g))
    }

    /// Concatenates along axis 0. Rank-0 inputs count as one row.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let tail: Vec<usize> = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            let ptail = s.get(1..).unwrap_or(&[]);
            if ptail != tail.as_slice() {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            rows += s.first().copied().unwrap_or(1);
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), g))
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Scales each last-axis row to unit length: `x / sqrt(|x|² + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let n = last_dim(src.shape());
        let mut out = src.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let s = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= s);
            norms.push(s);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        let g = self.any_grad(&[x]);
        self.push_aux(value, Op::NormalizeRows(x), g, norms)
    }

    /// Picks `x[i, index[i]]` from each row of a matrix.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if index.len() != r || index.iter().any(|&j| j >= c) {
            return Err(Error::dim("pick", &[r, c], &[index.len()]));
        }
        let src = self.value(x).data();
        let data = index.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            g,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    /// Populates gradients for every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward called twice without reset"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, to: Var, contribution: Vec<f64>) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        match &mut self.grads[to.0] {
            Some(acc) => add_into(acc, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn send_with(&mut self, to: Var, f: impl FnOnce(&Self) -> Vec<f64>) {
        if self.nodes[to.0].needs_grad {
            let c = f(self);
            self.send(to, c);
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matmul lhs");
                let n = self.value(b).shape()[1];
                self.send_with(a, |t| matmul_nt(g, t.value(b).data(), m, n, k));
                self.send_with(b, |t| matmul_tn(t.value(a).data(), g, m, k, n));
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matmul_nt lhs");
                let n = self.value(b).shape()[0];
                self.send_with(a, |t| matmul_raw(g, t.value(b).data(), m, n, k));
                self.send_with(b, |t| matmul_tn(g, t.value(a).data(), m, n, k));
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2().expect("transpose input");
                self.send(a, transpose_raw(g, c, r));
            }
            &Op::Binary {
                kind,
                big,
                small,
                swapped,
            } => {
                let ns = self.value(small).numel();
                let sign_small = if kind == BinaryKind::Sub && !swapped { -1.0 } else { 1.0 };
                let sign_big = if kind == BinaryKind::Sub && swapped { -1.0 } else { 1.0 };
                self.send_with(big, |t| match kind {
                    BinaryKind::Mul => {
                        let sv = t.value(small).data();
                        g.chunks_exact(ns)
                            .flat_map(|c| c.iter().zip(sv).map(|(gv, y)| gv * y))
                            .collect()
                    }
                    _ => g.iter().map(|gv| gv * sign_big).collect(),
                });
                self.send_with(small, |t| {
                    let mut acc = vec![0.0; ns];
                    match kind {
                        BinaryKind::Mul => {
                            let bv = t.value(big).data();
                            for (gc, bc) in g.chunks_exact(ns).zip(bv.chunks_exact(ns)) {
                                for ((a, gv), x) in acc.iter_mut().zip(gc).zip(bc) {
                                    *a += gv * x;
                                }
                            }
                        }
                        _ => {
                            for gc in g.chunks_exact(ns) {
                                for (a, gv) in acc.iter_mut().zip(gc) {
                                    *a += gv * sign_small;
                                }
                            }
                        }
                    }
                    acc
                });
            }
            &Op::Scale(a, c) => self.send(a, g.iter().map(|v| v * c).collect()),
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let n = shape.get(axis).copied().unwrap_or(1);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + ii;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.send(x, dx);
            }
            &Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                let mut dx = vec![0.0; y.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for k in 0..n {
                        dr[k] = gr[k] - yr[k].exp() * total;
                    }
                }
                self.send(x, dx);
            }
            &Op::Gelu(x) => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.send(x, dx);
            }
            &Op::Tanh(x) => {
                let dx = node.value.data().iter().zip(g).map(|(y, gv)| gv * (1.0 - y * y)).collect();
                self.send(x, dx);
            }
            &Op::LayerNorm(x) => {
                let xhat = node.value.data();
                let n = last_dim(node.value.shape());
                let mut dx = vec![0.0; xhat.len()];
                for (r, ((dr, gr), hr)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                    let inv = node.aux[r];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgh = gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for k in 0..n {
                        dr[k] = inv * (gr[k] - mg - hr[k] * mgh);
                    }
                }
                self.send(x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.send(x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                self.send(x, vec![g[0] / n as f64; n]);
            }
            &Op::MeanRows(x) => {
                let (r, _) = self.value(x).dims2().expect("mean_rows input");
                let row: Vec<f64> = g.iter().map(|v| v / r as f64).collect();
                self.send(x, row.repeat(r));
            }
            &Op::SumLast(x) => {
                let n = last_dim(self.value(x).shape());
                let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.send(x, dx);
            }
            &Op::SliceRows { x, start } => {
                let src = self.value(x);
                let stride: usize = src.shape()[1..].iter().product();
                let mut dx = vec![0.0; src.numel()];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                self.send(x, dx);
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).dims2().expect("slice_cols input");
                let w = g.len() / r;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.send(x, dx);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    self.send(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = last_dim(node.value.shape());
                let r = g.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = last_dim(self.value(p).shape());
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.send(p, dp);
                    offset += w;
                }
            }
            &Op::NormalizeRows(x) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                let mut dx = vec![0.0; y.len()];
                for (r, ((dr, gr), yr)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
                    let s = node.aux[r];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        dr[k] = (gr[k] - yr[k] * dot) / s;
                    }
                }
                self.send(x, dx);
            }
            Op::Pick { x, index } => {
                let x = *x;
                let c = self.value(x).shape()[1];
                let mut dx = vec![0.0; self.value(x).numel()];
                for (i, &j) in index.iter().enumerate() {
                    dx[i * c + j] = g[i];
                }
                self.send(x, dx);
            }
            &Op::Reshape(x) => self.send(x, g.to_vec()),
        }
    }

    /// Gradient of the last backward pass with respect to `v`. `None` when
    /// `v` is untracked or was not reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.named(name).and_then(|v| self.grad(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        let i = tape.constant(&Tensor::eye(3));
        let av = tape.constant(&a);
        let out = tape.matmul(i, av).unwrap();
        assert!(tape.value(out).bit_eq(&a));

        let l = tape.constant(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let r = tape.constant(&Tensor::from_rows(&[&[0.0], &[1.0]]));
        let out = tape.matmul(l, r).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
        assert_eq!(tape.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_analytic_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(&Tensor::vector(vec![0.0, 2f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(approx_eq(tape.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));

        let x = tape.constant(&Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(approx_eq(tape.value(y).data(), &[0.5; 4], 1e-15));
    }

    #[test]
    fn elementwise_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(&Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 8.0]);

        let x = Tensor::from_rows(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -1.0]]);
        let xv = tape.constant(&x);
        let gamma = tape.constant(&Tensor::ones(&[3]));
        let beta = tape.constant(&Tensor::zeros(&[3]));
        let scaled = tape.mul(gamma, xv).unwrap();
        let y = tape.add(scaled, beta).unwrap();
        assert!(tape.value(y).bit_eq(&x));

        let g0 = tape.constant(&Tensor::scalar(0.0));
        let w = tape.constant(&Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let z = tape.mul(g0, w).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 4]);

        let bad = tape.constant(&Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(w, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sub_with_broadcast_on_the_left() {
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).trainable());
        let m = tape.leaf(&Tensor::from_rows(&[&[5.0, 5.0], &[7.0, 9.0]]).trainable());
        let d = tape.sub(s, m).unwrap();
        assert_eq!(tape.value(d).data(), &[-4.0, -3.0, -6.0, -7.0]);
        let loss = tape.sum(d);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[2.0, 2.0]);
        assert_eq!(tape.grad(m).unwrap(), &[-1.0; 4]);
    }

    #[test]
    fn backward_linear_map() {
        let mut tape = Tape::new();
        let w = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let wv = tape.constant(&w);
        let x = tape.leaf(&Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap().trainable());
        let y = tape.matmul(wv, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[9.0, 12.0]);
    }

    #[test]
    fn backward_softmax_sum_is_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]).trainable());
        let s = tape.softmax(z, 0).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert!(tape.grad(z).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).trainable());
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn unused_parameter_grad_stays_zero() {
        let mut used = Tensor::vector(vec![1.0, 2.0]).trainable();
        let mut unused = Tensor::vector(vec![3.0]).trainable();
        let mut tape = Tape::new();
        let a = tape.param("used", &used);
        let _b = tape.param("unused", &unused);
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        if let Some(g) = tape.param_grad("used") {
            used.accumulate_grad(g).unwrap();
        }
        if let Some(g) = tape.param_grad("unused") {
            unused.accumulate_grad(g).unwrap();
        }
        assert_eq!(used.grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(unused.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn named_params_are_deduplicated() {
        let t = Tensor::vector(vec![2.0]).trainable();
        let mut tape = Tape::new();
        let a = tape.param("p", &t);
        let b = tape.param("p", &t);
        assert_eq!(a, b);
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("p").unwrap(), &[4.0]);
    }

    #[test]
    fn concat_and_slices_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let b = tape.constant(&Tensor::from_rows(&[&[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 3]);
        let mid = tape.slice_rows(c, 1, 2).unwrap();
        assert_eq!(tape.value(mid).data(), &[4.0, 5.0, 6.0]);
        let cols = tape.slice_cols(c, 1, 3).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.0, 3.0, 5.0, 6.0, 8.0, 9.0]);
        let left = tape.slice_cols(c, 0, 1).unwrap();
        let joined = tape.concat_cols(&[left, cols]).unwrap();
        assert!(tape.value(joined).bit_eq(tape.value(c)));
        let s1 = tape.constant(&Tensor::scalar(1.0));
        let s2 = tape.constant(&Tensor::scalar(2.0));
        let v = tape.concat(&[s1, s2]).unwrap();
        assert_eq!(tape.shape(v), &[2]);
    }
}
