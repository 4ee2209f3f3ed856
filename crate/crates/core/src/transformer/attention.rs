//! Scaled dot-product attention and the column-split multi-head form.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

use super::{layer_param, AttnMask, EncoderConfig, Variant};

/// `softmax(QKᵀ/√d_k + mask)`.
pub fn attention_probs(g: &mut Graph, q: Var, k: Var, mask: &AttnMask, d_k: usize) -> Result<Var> {
    let (qr, kr) = (g.value(q).rows(), g.value(k).rows());
    if mask.rows() != qr || mask.cols() != kr {
        return Err(Error::shape("attention_mask", &[mask.rows(), mask.cols()], &[qr, kr]));
    }
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let bias = g.constant(mask.bias().clone());
    let masked = g.add(scaled, bias)?;
    Ok(g.softmax(masked))
}

/// `softmax(QKᵀ/√d_k + mask)·V`.
pub fn self_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &AttnMask, d_k: usize) -> Result<Var> {
    if g.value(k).rows() != g.value(v).rows() {
        return Err(Error::shape("self_attention", g.shape(k), g.shape(v)));
    }
    let probs = attention_probs(g, q, k, mask, d_k)?;
    g.matmul(probs, v)
}

/// Projects `x` with full `R×R` weights, runs attention on each block of
/// `R/heads` columns and concatenates the heads back to width `R`.
pub fn multi_head(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
    let r = g.value(wq).rows();
    if heads == 0 || !r.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {r} not divisible by {heads} heads")));
    }
    let dk = r / heads;
    let q = g.matmul_nt(x, wq)?;
    let k = g.matmul_nt(x, wk)?;
    let v = g.matmul_nt(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        outs.push(self_attention(g, qh, kh, vh, mask, dk)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}

pub fn multi_head_bert(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &AttnMask,
) -> Result<Var> {
    let name = |p: &str| layer_param(Variant::Bert, layer, p);
    let wq = g.param(store, &name("q.w"))?;
    let wk = g.param(store, &name("k.w"))?;
    let wv = g.param(store, &name("v.w"))?;
    multi_head(g, x, wq, wk, wv, cfg.heads, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![0.3, -2.0]));
        let k = g.constant(Tensor::row(vec![1.5, 4.0]));
        let v = g.constant(Tensor::row(vec![7.0, -1.25]));
        let out = self_attention(&mut g, q, k, v, &AttnMask::open(1, 1), 2).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -1.25]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, -1.0]]).unwrap());
        let out = self_attention(&mut g, q, k, v, &AttnMask::open(2, 2), 2).unwrap();
        for i in 0..2 {
            assert!((g.value(out).get(i, 0) - 3.0).abs() < 1e-15);
            assert!((g.value(out).get(i, 1) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_key_is_ignored() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![1.0, 1.0]));
        let k = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![100.0, 100.0]]).unwrap());
        let mask = AttnMask::from_fn(1, 2, |_, j| j == 0);
        let p = attention_probs(&mut g, q, k, &mask, 2).unwrap();
        // exp(-10000 + 10/√2) underflows far below the threshold
        assert!(g.value(p).get(0, 1) < 1e-12);
        let out = self_attention(&mut g, q, k, v, &mask, 2).unwrap();
        assert!((g.value(out).get(0, 0) - 2.0).abs() < 1e-12);
        assert!((g.value(out).get(0, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 4]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        assert!(self_attention(&mut g, a, a, b, &AttnMask::open(2, 2), 4).is_err());
        assert!(self_attention(&mut g, a, a, a, &AttnMask::open(2, 3), 4).is_err());
        let w = g.constant(Tensor::zeros(&[4, 4]));
        assert!(multi_head(&mut g, a, w, w, w, 3, &AttnMask::open(2, 2)).is_err());
    }

    #[test]
    fn one_head_equals_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let ws: Vec<Var> = (0..3).map(|_| g.constant(Tensor::randn(&[4, 4], 0.5, &mut rng))).collect();
        let mask = AttnMask::padding(3, &[1, 1, 0]);
        let mh = multi_head(&mut g, x, ws[0], ws[1], ws[2], 1, &mask).unwrap();
        let q = g.matmul_nt(x, ws[0]).unwrap();
        let k = g.matmul_nt(x, ws[1]).unwrap();
        let v = g.matmul_nt(x, ws[2]).unwrap();
        let sa = self_attention(&mut g, q, k, v, &mask, 4).unwrap();
        assert_eq!(g.value(mh), g.value(sa));
    }

    /// Head-by-head recomputation with explicit loops.
    fn brute_heads(x: &Tensor, w: [&Tensor; 3], heads: usize) -> Tensor {
        let (s, r) = (x.rows(), x.cols());
        let dk = r / heads;
        let proj = |w: &Tensor, i: usize, c: usize| (0..r).map(|t| x.get(i, t) * w.get(c, t)).sum::<f64>();
        let mut out = Tensor::zeros(&[s, r]);
        for h in 0..heads {
            let cols: Vec<usize> = (h * dk..(h + 1) * dk).collect();
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| {
                        cols.iter().map(|&c| proj(w[0], i, c) * proj(w[1], j, c)).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for &c in &cols {
                    let v: f64 = (0..s).map(|j| e[j] / z * proj(w[2], j, c)).sum();
                    out.set(i, c, v);
                }
            }
        }
        out
    }

    #[test]
    fn two_heads_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 4], 0.7, &mut rng)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv: Vec<Var> = w.iter().map(|t| g.constant(t.clone())).collect();
        let out = multi_head(&mut g, xv, wv[0], wv[1], wv[2], 2, &AttnMask::open(3, 3)).unwrap();
        let expect = brute_heads(&x, [&w[0], &w[1], &w[2]], 2);
        assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
        assert_eq!(g.value(out).shape(), &[3, 4]);
    }

    #[test]
    fn probability_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[5, 4], 2.0, &mut rng));
        let k = g.constant(Tensor::randn(&[6, 4], 2.0, &mut rng));
        let mask = AttnMask::from_fn(5, 6, |i, j| (i + j) % 3 != 0 || j == 1);
        let p = attention_probs(&mut g, q, k, &mask, 4).unwrap();
        let pv = g.value(p);
        for i in 0..5 {
            assert!((pv.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..6 {
                if !mask.allowed(i, j) {
                    assert!(pv.get(i, j) < 1e-12);
                }
            }
        }
    }
}
