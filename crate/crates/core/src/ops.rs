//! Forward kernels on plain tensors.
//!
//! These are the numeric building blocks shared by the differentiable
//! [`crate::tape::Graph`] and by callers that only need a forward value.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.ndim() == 2 {
        Ok(())
    } else {
        Err(Error::shape(op, t.shape(), &[0, 0]))
    }
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let x = ad[i * k + t];
            if x == 0.0 {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c = a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_nt", a)?;
    require_matrix("matmul_nt", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c = aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_tn", a)?;
    require_matrix("matmul_tn", b)?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for t in 0..k {
        let brow = &bd[t * n..(t + 1) * n];
        for i in 0..m {
            let x = ad[t * m + i];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_matrix("transpose", a)?;
    let (m, n) = (a.rows(), a.cols());
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Adds a length-`c` bias to every row of an `r×c` matrix.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if bias.len() != c {
        return Err(Error::shape("add_row", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => gelu_scalar(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => gelu_derivative(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact-erf GeLU: `0.5·x·(1 + erf(x/√2))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// `f(x · wᵀ + b)`, with `w: out×in` and `b` broadcast over rows.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor, f: Activation) -> Result<Tensor> {
    let z = add_row(&matmul_nt(x, w)?, b)?;
    Ok(z.map(|v| f.apply(v)))
}

/// Numerically stable softmax along `axis` of a tensor of any rank.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Param(format!("softmax axis {axis} out of range for shape {shape:?}")));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * extent + t) * inner + i;
            let max = (0..extent).map(|t| d[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..extent {
                let e = (d[idx(t)] - max).exp();
                d[idx(t)] = e;
                total += e;
            }
            for t in 0..extent {
                d[idx(t)] /= total;
            }
        }
    }
    Ok(out)
}

/// Softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols().max(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Per-row normalization results kept for the backward pass.
pub struct NormParts {
    pub output: Tensor,
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row over its features, then applies `gamma`/`beta`.
pub fn feature_norm_parts(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<NormParts> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("feature_norm", x.shape(), gamma.shape()));
    }
    let mut normalized = x.clone();
    let mut output = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (nrow, orow) in normalized.data_mut().chunks_mut(c.max(1)).zip(output.data_mut().chunks_mut(c.max(1))) {
        let mean = nrow.iter().sum::<f64>() / c as f64;
        let var = nrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let xh = (nrow[j] - mean) * is;
            nrow[j] = xh;
            orow[j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(NormParts { output, normalized, inv_std })
}

pub fn feature_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(feature_norm_parts(x, gamma, beta, eps)?.output)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Keep-mask for inverted dropout: each entry is `0` or `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout probability {p} not in [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout probability {p} not in [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(out)
}
