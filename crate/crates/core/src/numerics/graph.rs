//! Recording computation graph with reverse-mode gradients.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. Because a node can only refer to nodes recorded before it,
//! the node vector is already in topological order and the backward pass is
//! a single sweep in reverse recording order.
//!
//! Backward can start from a scalar loss or from caller-supplied seed
//! gradients at arbitrary intermediate nodes. The latter is what split
//! training needs: one party holds the tape, the other party hands back the
//! gradient of its loss with respect to the tensor it received.

use std::rc::Rc;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, end: usize },
    GatherRows { src: Var, idx: Rc<[usize]> },
    ScatterAddRows { src: Var, idx: Rc<[usize]> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only operation record. Single-threaded; move it, don't share it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros when no path from the seeds reached it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(v).shape()),
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Some(a.to_vec())
    } else if nb == 1 {
        Some(a.to_vec())
    } else if na == 1 {
        Some(b.to_vec())
    } else if a.len() > b.len() && a.ends_with(b) {
        Some(a.to_vec())
    } else if b.len() > a.len() && b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// `g * other` with `other` repeated along the leading axes.
fn broadcast_product(g: &[f64], other: &[f64]) -> Vec<f64> {
    if g.len() == other.len() {
        return g.iter().zip(other).map(|(a, b)| a * b).collect();
    }
    let mut out = Vec::with_capacity(g.len());
    if other.is_empty() {
        return out;
    }
    for chunk in g.chunks_exact(other.len()) {
        out.extend(chunk.iter().zip(other).map(|(a, b)| a * b));
    }
    out
}

/// Sums a full-size gradient down to a broadcast operand of `len` elements.
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    if len == 0 {
        return out;
    }
    for chunk in grad.chunks_exact(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

/// Per-target, per-column sums with the contributions sorted before adding,
/// so the result does not depend on the order of the source rows.
fn scatter_sorted_sum(src: &Tensor, idx: &[usize], n_out: usize) -> Vec<f64> {
    let c = src.cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_out];
    for (row, &t) in idx.iter().enumerate() {
        members[t].push(row);
    }
    let data = src.data();
    let mut out = vec![0.0; n_out * c];
    let mut buf = Vec::new();
    for (t, rows) in members.iter().enumerate() {
        match rows.len() {
            0 => {}
            1 => out[t * c..(t + 1) * c].copy_from_slice(&data[rows[0] * c..(rows[0] + 1) * c]),
            _ => {
                for col in 0..c {
                    buf.clear();
                    buf.extend(rows.iter().map(|&r| data[r * c + col]));
                    buf.sort_by(f64::total_cmp);
                    out[t * c + col] = buf.iter().sum();
                }
            }
        }
    }
    out
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, data)?, rg, Op::MatMul(a, b)))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::dim(name, ta.shape(), tb.shape()))?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let data: Vec<f64> = if la == n && lb == n {
            da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect()
        } else if n > 0 && la == n {
            let mut out = Vec::with_capacity(n);
            for chunk in da.chunks_exact(lb) {
                out.extend(chunk.iter().zip(db).map(|(x, y)| f(*x, *y)));
            }
            out
        } else if n > 0 && lb == n {
            let mut out = Vec::with_capacity(n);
            for chunk in db.chunks_exact(la) {
                out.extend(da.iter().zip(chunk).map(|(x, y)| f(*x, *y)));
            }
            out
        } else {
            (0..n).map(|i| f(da[i % la], db[i % lb])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, rg, op))
    }

    /// Elementwise sum; the smaller operand broadcasts when its shape is a
    /// suffix of the larger one (or it has a single element).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, rg, Op::Affine(x, scale))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, rg, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Concatenation along the last axis. Zero-width inputs contribute nothing.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != lead.len() + 1 || t.shape()[..lead.len()] != lead[..] {
                return Err(Error::dim("concat", self.value(parts[0]).shape(), t.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(src);
        let c = t.cols();
        if start > end || end > c {
            return Err(Error::dim("slice", t.shape(), &[start, end]));
        }
        let w = end - start;
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * c + start..r * c + end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Slice { src, start, end }))
    }

    /// Row `r` of the output is row `idx[r]` of the (matrix-viewed) input.
    pub fn gather_rows(&mut self, src: Var, idx: Rc<[usize]>) -> Result<Var> {
        let t = self.value(src);
        let (rows, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::GraphConsistency(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::matrix(idx.len(), c, data)?, rg, Op::GatherRows { src, idx }))
    }

    /// Row `t` of the output is the sum of input rows `r` with `idx[r] == t`.
    /// Targets with no contributions are zero. The sum is independent of the
    /// order of input rows.
    pub fn scatter_add_rows(&mut self, src: Var, idx: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let t = self.value(src);
        if idx.len() != t.rows() {
            return Err(Error::dim("scatter_add_rows", t.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::GraphConsistency(format!(
                "target index {bad} out of range for {n_out} targets"
            )));
        }
        let c = t.cols();
        let data = scatter_sorted_sum(t, &idx, n_out);
        let rg = self.rg(src);
        Ok(self.push(Tensor::matrix(n_out, c, data)?, rg, Op::ScatterAddRows { src, idx }))
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(src).clone().reshape(shape)?;
        let rg = self.rg(src);
        Ok(self.push(value, rg, Op::Reshape(src)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Degenerate("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(x)))
    }

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Error::dim("mse", self.value(pred).shape(), self.value(target).shape()));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Backward sweep from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?} needs an explicit seed",
                t.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::full(t.shape(), 1.0))])
    }

    /// Backward sweep from externally supplied gradients at any recorded
    /// values. Equivalent to differentiating `sum_k <seed_k, value_k>`.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, seed) in seeds {
            let val = self.value(*v);
            if val.shape() != seed.shape() {
                return Err(Error::dim("backward seed", val.shape(), seed.shape()));
            }
            self.accumulate(&mut grads, *v, seed.data());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.cols(), tb.cols());
                if self.rg(*a) {
                    self.accumulate(grads, *a, &matmul_nt(gd, tb.data(), m, n, k));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, &matmul_tn(ta.data(), gd, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, &reduce_to(gd, self.value(*a).numel()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, &reduce_to(gd, self.value(*b).numel()));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, &reduce_to(gd, self.value(*a).numel()));
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &reduce_to(&neg, self.value(*b).numel()));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (da.len(), db.len());
                if self.rg(*a) {
                    let full = broadcast_product(gd, db);
                    self.accumulate(grads, *a, &reduce_to(&full, la));
                }
                if self.rg(*b) {
                    let full = broadcast_product(gd, da);
                    self.accumulate(grads, *b, &reduce_to(&full, lb));
                }
            }
            Op::Affine(x, scale) => {
                let d: Vec<f64> = gd.iter().map(|v| v * scale).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                let d: Vec<f64> = gd
                    .iter()
                    .zip(xin)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) && w > 0 {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, &d);
                    }
                    offset += w;
                }
            }
            Op::Slice { src, start, end } => {
                let t = self.value(*src);
                let (rows, c, w) = (t.rows(), t.cols(), end - start);
                let mut d = vec![0.0; t.numel()];
                for r in 0..rows {
                    d[r * c + start..r * c + end].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *src, &d);
            }
            Op::GatherRows { src, idx } => {
                let t = self.value(*src);
                let c = t.cols();
                let mut d = vec![0.0; t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for col in 0..c {
                        d[i * c + col] += gd[r * c + col];
                    }
                }
                self.accumulate(grads, *src, &d);
            }
            Op::ScatterAddRows { src, idx } => {
                let c = node.value.cols();
                let mut d = Vec::with_capacity(idx.len() * c);
                for &t in idx.iter() {
                    d.extend_from_slice(&gd[t * c..(t + 1) * c]);
                }
                self.accumulate(grads, *src, &d);
            }
            Op::Reshape(src) => self.accumulate(grads, *src, gd),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, &vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, &vec![gd[0] / n as f64; n]);
            }
        }
    }
}

impl Graph {
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, d: &[f64]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, d.to_vec()).expect("gradient matches value shape"));
            }
        }
    }
}
