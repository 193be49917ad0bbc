//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] lives for one forward pass. Leaves are either trainable
//! ([`Tape::param`]) or constant ([`Tape::constant`]); every operation
//! appends a node whose value is computed eagerly. [`Tape::backward`] walks
//! the nodes once in reverse order and accumulates gradients into every
//! node that depends on a trainable leaf.
//!
//! ```
//! use rmadapter_core::{Tape, Tensor};
//!
//! let theta = Tensor::scalar(3.0);
//! let mut tape = Tape::new();
//! let x = tape.param(&theta);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(&tape, x).item(), 6.0);
//! ```

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{
    self, gemm_acc, normal_cdf, normal_pdf, require_same_shape, softmax_in_place, Tensor,
};

/// Epsilon inside the layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Added to masked attention scores. Finite so scores stay finite; `exp` of it underflows to 0.
const MASK_VALUE: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SqL2(Var, Var),
    L1(Var, Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: Vec<f64>,
    },
}

/// Layout of a stacked batch of sequences for [`Tape::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub seq_len: usize,
    pub heads: usize,
    pub causal: bool,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    /// Outputs of [`Tape::detach`], in call order.
    detached: Vec<Var>,
    /// Values substituted for detach outputs, in call order.
    pinned: Option<Vec<Tensor>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it does not depend on any trainable leaf
    /// or the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var` shaped like its value; zeros when unreachable.
    pub fn wrt(&self, tape: &Tape<'_>, var: Var) -> Tensor {
        let like = tape.value(var);
        match self.get(var) {
            Some(g) => Tensor::with_shape_of(g.to_vec(), like),
            None => Tensor::zeros(like.shape()),
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `i`-th [`Tape::detach`] returns `values[i]` instead of its input.
    ///
    /// Holding detached values fixed while parameters move makes finite
    /// differences agree with the stop-gradient semantics of the tape.
    pub fn with_pinned_detach(values: Vec<Tensor>) -> Self {
        Self {
            pinned: Some(values),
            ..Self::default()
        }
    }

    /// Values of every detach output so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached
            .iter()
            .map(|v| self.value(*v).clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf owning `t`.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf borrowing `t`.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf owning `t`.
    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same value, cut from the graph: nothing upstream receives gradient through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let pinned = self
            .pinned
            .as_ref()
            .and_then(|p| p.get(self.detached.len()))
            .filter(|p| p.shape() == self.value(x).shape())
            .cloned();
        let value = pinned.unwrap_or_else(|| self.value(x).clone());
        let out = self.push(value, Op::Leaf, false);
        self.detached.push(out);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_with("add", self.value(a), self.value(b), |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_with("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_with("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// `x[r, :] + t[r mod P, :]` for `x: R×n`, `t: P×n` (or `t: n`, treated as `1×n`).
    ///
    /// Covers bias addition (`P = 1`) and positional embeddings over stacked sequences.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let xv = self.value(x);
        let tv = self.value(t);
        let n = xv.cols();
        let period = tv.rows();
        if xv.shape().len() != 2
            || tv.cols() != n
            || period == 0
            || !xv.rows().is_multiple_of(period)
        {
            return Err(Error::Shape {
                op: "add_tiled",
                left: xv.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(n.max(1)).enumerate() {
            let tr = tv.row(r % period);
            for (o, b) in row.iter_mut().zip(tr) {
                *o += b;
            }
        }
        let out = Tensor::with_shape_of(out, xv);
        let g = self.any_grad(&[x, t]);
        Ok(self.push(out, Op::AddTiled(x, t), g))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let g = self.needs_grad(x);
        self.push(out, Op::Scale(x, s), g)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        let g = self.needs_grad(x);
        self.push(out, Op::Gelu(x), g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::softmax_rows(self.value(x));
        let g = self.needs_grad(x);
        self.push(out, Op::SoftmaxRows(x), g)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both length `n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if xv.shape().len() != 2 || gv.len() != n || bv.len() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::with_shape_of(out, xv);
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(x))?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::Transpose(x), g))
    }

    /// Rows of `x` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.rows();
        let n = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: i,
                    limit: rows,
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[idx.len(), n], out)?;
        let g = self.needs_grad(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            g,
        ))
    }

    /// Stacks matrices (or vectors as single rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![n],
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[rows, n], data)?;
        let g = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let g = self.needs_grad(x);
        self.push(out, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let g = self.needs_grad(x);
        self.push(out, Op::Mean(x), g)
    }

    /// Element-mean squared difference.
    pub fn sq_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::scalar(tensor::sq_l2(self.value(a), self.value(b))?);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::SqL2(a, b), g))
    }

    /// Element-sum absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::scalar(tensor::l1(self.value(a), self.value(b))?);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::L1(a, b), g))
    }

    /// Scales every row to unit L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let rows = xv.rows();
        let mut norms = Vec::with_capacity(rows);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let nr = tensor::norm(row);
            if nr == 0.0 {
                return Err(Error::DegenerateVector {
                    op: "normalize_rows",
                });
            }
            for v in row.iter_mut() {
                *v /= nr;
            }
            norms.push(nr);
        }
        let out = Tensor::with_shape_of(out, xv);
        let g = self.needs_grad(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, g))
    }

    /// Cosine similarity of two vectors as a scalar node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same_shape("cosine_sim", self.value(a), self.value(b))?;
        let d = self.value(a).len();
        let a2 = self.reshape(a, &[1, d])?;
        let b2 = self.reshape(b, &[d, 1])?;
        let an = self.normalize_rows(a2)?;
        let bt = self.transpose(b2)?;
        let bn = self.normalize_rows(bt)?;
        let bnt = self.transpose(bn)?;
        let s = self.matmul(an, bnt)?;
        self.reshape(s, &[])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::IndexOutOfRange {
                    what: "label",
                    index: y,
                    limit: c,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            total += lse - row[y];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let out = Tensor::scalar(total / labels.len().max(1) as f64);
        let g = self.needs_grad(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Multi-head scaled dot-product attention over a stack of equal-length sequences.
    ///
    /// `q`, `k`, `v` are `(B·L)×d`; heads split `d` into contiguous column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttentionGeometry) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        require_same_shape("attention", qv, kv)?;
        require_same_shape("attention", qv, vv)?;
        let rows = qv.rows();
        let d = qv.cols();
        let AttentionGeometry {
            seq_len: l,
            heads,
            causal,
        } = geom;
        if qv.shape().len() != 2 || l == 0 || rows % l != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                left: qv.shape().to_vec(),
                right: vec![l, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let batch = rows / l;
        let mut probs = vec![0.0; batch * heads * l * l];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
                for i in 0..l {
                    let qi = &qd[(b * l + i) * d + h * dh..(b * l + i) * d + (h + 1) * dh];
                    for j in 0..l {
                        p[i * l + j] = if causal && j > i {
                            MASK_VALUE
                        } else {
                            let kj = &kd[(b * l + j) * d + h * dh..(b * l + j) * d + (h + 1) * dh];
                            tensor::dot(qi, kj) * scale
                        };
                    }
                    softmax_in_place(&mut p[i * l..(i + 1) * l]);
                    let o = &mut out[(b * l + i) * d + h * dh..(b * l + i) * d + (h + 1) * dh];
                    for j in 0..l {
                        let w = p[i * l + j];
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * l + j) * d + h * dh..(b * l + j) * d + (h + 1) * dh];
                        for (ov, x) in o.iter_mut().zip(vj) {
                            *ov += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::with_shape_of(out, qv);
        let g = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Each node is visited once, in reverse execution order; gradients from
    /// multiple consumers accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.needs_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_acc(g, false, bv.data(), true, m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_acc(av.data(), true, g, false, k, m, n, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(acc) = self.acc(grads, v) {
                        acc.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(acc) = self.acc(grads, *a) {
                    acc.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(acc) = self.acc(grads, *b) {
                    acc.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(acc) = self.acc(grads, *a) {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddTiled(x, t) => {
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                let tv = self.value(*t);
                let (period, n) = (tv.rows(), tv.cols());
                if let Some(acc) = self.acc(grads, *t) {
                    for (r, row) in g.chunks(n.max(1)).enumerate() {
                        let dst = &mut acc[(r % period) * n..(r % period + 1) * n];
                        dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(acc) = self.acc(grads, *x) {
                    for i in 0..acc.len() {
                        let z = xv[i];
                        acc[i] += g[i] * (normal_cdf(z) + z * normal_pdf(z));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols().max(1);
                if let Some(acc) = self.acc(grads, *x) {
                    for ((y, gr), a) in out.data().chunks(n).zip(g.chunks(n)).zip(acc.chunks_mut(n))
                    {
                        let s = tensor::dot(y, gr);
                        for j in 0..n {
                            a[j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gamma).data();
                if let Some(acc) = self.acc(grads, *gamma) {
                    for (gr, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            acc[j] += gr[j] * h[j];
                        }
                    }
                }
                if let Some(acc) = self.acc(grads, *beta) {
                    for gr in g.chunks(n) {
                        acc.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(acc) = self.acc(grads, *x) {
                    let nf = n as f64;
                    let mut dh = vec![0.0; n];
                    for (r, (gr, h)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2 = tensor::dot(&dh, h);
                        let a = &mut acc[r * n..(r + 1) * n];
                        for j in 0..n {
                            a[j] += inv_std[r] / nf * (nf * dh[j] - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(acc) = self.acc(grads, *x) {
                    let (m, n) = (out.rows(), out.cols());
                    for i in 0..m {
                        for j in 0..n {
                            acc[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let n = out.cols();
                if let Some(acc) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut acc[i * n..(i + 1) * n];
                        dst.iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(acc) = self.acc(grads, *p) {
                        acc.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, v)| *o += v);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Sum(x) => {
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(acc) = self.acc(grads, *x) {
                    let s = g[0] / acc.len().max(1) as f64;
                    acc.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::SqL2(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / av.len().max(1) as f64;
                if let Some(acc) = self.acc(grads, *a) {
                    for i in 0..acc.len() {
                        acc[i] += s * (av[i] - bv[i]);
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for i in 0..acc.len() {
                        acc[i] -= s * (av[i] - bv[i]);
                    }
                }
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(acc) = self.acc(grads, *a) {
                    for i in 0..acc.len() {
                        acc[i] += g[0] * sign(av[i] - bv[i]);
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for i in 0..acc.len() {
                        acc[i] -= g[0] * sign(av[i] - bv[i]);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = out.cols().max(1);
                if let Some(acc) = self.acc(grads, *x) {
                    for (r, (y, gr)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        let s = tensor::dot(y, gr);
                        let a = &mut acc[r * n..(r + 1) * n];
                        for j in 0..n {
                            a[j] += (gr[j] - y[j] * s) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let s = g[0] / labels.len().max(1) as f64;
                if let Some(acc) = self.acc(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            acc[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => self.attention_backward(*q, *k, *v, *geom, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let l = geom.seq_len;
        let heads = geom.heads;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let batch = self.value(q).rows() / l;
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; l * l];
        let col = |row: usize, h: usize| row * d + h * dh..row * d + (h + 1) * dh;
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
                for i in 0..l {
                    let go = &g[col(b * l + i, h)];
                    // dP[i, j] = dO[i]·V[j]; dV[j] += P[i, j]·dO[i]
                    let mut row_dot = 0.0;
                    for j in 0..l {
                        let pij = p[i * l + j];
                        let dp = tensor::dot(go, &vd[col(b * l + j, h)]);
                        ds[i * l + j] = dp;
                        row_dot += pij * dp;
                        if pij != 0.0 {
                            let dvj = &mut dv[col(b * l + j, h)];
                            dvj.iter_mut().zip(go).for_each(|(o, x)| *o += pij * x);
                        }
                    }
                    for j in 0..l {
                        ds[i * l + j] = p[i * l + j] * (ds[i * l + j] - row_dot) * scale;
                    }
                }
                for i in 0..l {
                    for j in 0..l {
                        let s = ds[i * l + j];
                        if s == 0.0 {
                            continue;
                        }
                        let (ri, rj) = (col(b * l + i, h), col(b * l + j, h));
                        for t in 0..dh {
                            dq[ri.start + t] += s * kd[rj.start + t];
                            dk[rj.start + t] += s * qd[ri.start + t];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.acc(grads, var) {
                acc.iter_mut().zip(&delta).for_each(|(o, x)| *o += x);
            }
        }
    }
}
