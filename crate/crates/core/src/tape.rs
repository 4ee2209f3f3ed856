//! Reverse-mode differentiation over a recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive call
//! evaluates its value immediately and appends one node; [`Graph::backward`]
//! then walks the nodes once in reverse order, accumulating adjoints.
//! Parameters enter through [`Graph::param`], which reads the current value
//! out of a [`ParamStore`] and reuses one node per name, so a tensor used in
//! two places (tied weights) collects both gradient contributions.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Mode};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Softmax(Var),
    Norm { x: Var, gamma: Var, beta: Var, normalized: Tensor, inv_std: Vec<f64> },
    Gather(Var, Vec<Option<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// The node for a named parameter; differentiable iff the entry is trainable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store.get(name).ok_or_else(|| Error::Consistency(format!("unknown parameter {name}")))?;
        let v = self.push(entry.value.clone(), Op::Param, entry.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = ops::add_row(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return x;
        }
        let value = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(x);
        self.push(value, Op::Act(x, f), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = ops::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn feature_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let parts = ops::feature_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            parts.output,
            Op::Norm { x, gamma, beta, normalized: parts.normalized, inv_std: parts.inv_std },
            rg,
        ))
    }

    /// `f(x · wᵀ + b)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, f: Activation) -> Result<Var> {
        let z = self.matmul_nt(x, w)?;
        let z = self.add_row(z, b)?;
        Ok(self.activation(z, f))
    }

    /// Inverted dropout; the identity in eval mode or for `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let mask = ops::dropout_mask(self.value(x).len(), p, rng)?;
        let mask = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, mask)
    }

    /// `out[i] = src[index[i]]` over flat storage, or `0` where the index is `None`.
    pub fn gather(&mut self, src: Var, shape: Vec<usize>, index: Vec<Option<usize>>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let sd = self.value(src).data();
        let mut data = Vec::with_capacity(n);
        for i in &index {
            match *i {
                Some(k) if k < sd.len() => data.push(sd[k]),
                Some(k) => {
                    return Err(Error::OutOfRange(format!("gather index {k} for source of {} elements", sd.len())))
                }
                None => data.push(0.0),
            }
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather(src, index), rg))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = (self.value(table).rows(), self.value(table).cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange(format!("row {bad} of table with {r} rows")));
        }
        let index = ids.iter().flat_map(|&i| (0..c).map(move |j| Some(i * c + j))).collect();
        self.gather(table, vec![ids.len(), c], index)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let ids: Vec<usize> = (start..end).collect();
        self.rows(x, &ids)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if start > end || end > c {
            return Err(Error::OutOfRange(format!("columns {start}..{end} of {c}")));
        }
        let w = end - start;
        let index = (0..r).flat_map(|i| (start..end).map(move |j| Some(i * c + j))).collect();
        self.gather(x, vec![r, w], index)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![r, total], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = ops::transpose(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Sum of all elements as a `1×1` value.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn sum_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let k = lv.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::OutOfRange(format!("target {bad} with {k} classes")));
        }
        let probs = ops::softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    ///
    /// Frozen parameters that appear in the graph get zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Param = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj)?;
        }

        let mut grads = Gradients::new();
        let mut names: Vec<(&String, &Var)> = self.params.iter().collect();
        names.sort_by_key(|(_, v)| v.0);
        for (name, v) in names {
            let g = if v.0 <= loss.0 { adj[v.0].take() } else { None };
            grads.insert(name.clone(), g.unwrap_or_else(|| Tensor::zeros(self.shape(*v))));
        }
        Ok(grads)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(adj, *a, ops::matmul_nt(g, self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(adj, *b, ops::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(adj, *a, ops::matmul(g, self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(adj, *b, ops::matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(adj, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.accumulate(adj, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(adj, *x, g.clone());
                if self.rg(*b) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(adj, *b, Tensor::from_parts(shape, gb));
                }
            }
            Op::Scale(x, s) => self.accumulate(adj, *x, g.map(|v| v * s)),
            Op::Act(x, f) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let data = g.data().iter().enumerate().map(|(i, gi)| gi * f.derivative(xv[i], yv[i])).collect();
                self.accumulate(adj, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Softmax(x) => {
                let c = g.cols().max(1);
                let y = &node.value;
                let mut out = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    out.extend(grow.iter().zip(yrow).map(|(gi, yi)| yi * (gi - dot)));
                }
                self.accumulate(adj, *x, Tensor::from_parts(g.shape().to_vec(), out));
            }
            Op::Norm { x, gamma, beta, normalized, inv_std } => {
                let c = g.cols().max(1);
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (grow, nrow) in g.data().chunks(c).zip(normalized.data().chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * nrow[j];
                            db[j] += grow[j];
                        }
                    }
                    let gs = self.shape(*gamma).to_vec();
                    let bs = self.shape(*beta).to_vec();
                    self.accumulate(adj, *gamma, Tensor::from_parts(gs, dg));
                    self.accumulate(adj, *beta, Tensor::from_parts(bs, db));
                }
                if self.rg(*x) {
                    let n = c as f64;
                    let mut out = Vec::with_capacity(g.len());
                    for ((grow, nrow), is) in g.data().chunks(c).zip(normalized.data().chunks(c)).zip(inv_std) {
                        let dxh: Vec<f64> = (0..c).map(|j| grow[j] * gam[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        out.extend((0..c).map(|j| is / n * (n * dxh[j] - s1 - nrow[j] * s2)));
                    }
                    self.accumulate(adj, *x, Tensor::from_parts(g.shape().to_vec(), out));
                }
            }
            Op::Gather(src, index) => {
                let mut out = Tensor::zeros(self.shape(*src));
                let od = out.data_mut();
                for (gi, i) in g.data().iter().zip(index) {
                    if let Some(k) = i {
                        od[*k] += gi;
                    }
                }
                self.accumulate(adj, *src, out);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(adj, p, Tensor::from_parts(self.shape(p).to_vec(), data));
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(adj, p, Tensor::from_parts(self.shape(p).to_vec(), data));
                    }
                    offset += c;
                }
            }
            Op::Transpose(x) => self.accumulate(adj, *x, ops::transpose(g)?),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(adj, *x, g.clone().reshape(&shape)?);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(adj, *x, Tensor::full(self.shape(*x), s));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = g.data()[0] / targets.len() as f64;
                let mut out = probs.clone();
                let k = out.cols();
                for (i, &t) in targets.iter().enumerate() {
                    out.data_mut()[i * k + t] -= 1.0;
                }
                out.scale_assign(s);
                self.accumulate(adj, *logits, out);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tied_parameter_uses_one_node() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![2.0]), true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        // loss = w * w → d/dw = 2w = 4
        let y = g.mul(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn frozen_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::row(vec![2.0, 3.0]), false).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 5]));
        let l = g.cross_entropy(z, &[0, 4, 2]).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_and_concat_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 4).unwrap();
        let back = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let top = g.slice_rows(x, 0, 1).unwrap();
        let rest = g.slice_rows(x, 1, 3).unwrap();
        let back = g.concat_rows(&[top, rest]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn row_lookup_rejects_bad_id() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.rows(t, &[2]).is_err());
    }
}
