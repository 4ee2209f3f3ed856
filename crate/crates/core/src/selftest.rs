//! Fast built-in consistency checks run by `aesf selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bow::{fit_tfidf, vectorize};
use crate::error::Result;
use crate::gradcheck::grad_check_sampled;
use crate::lstm::{gate_name, init_params as lstm_params, lstm_cell_eval, LstmConfig, LstmState};
use crate::metrics::{cohen_kappa, confusion, qwk, ConfusionMatrix};
use crate::tape::Graph;
use crate::tensor::Tensor;
use crate::tokenizer::{wrap, Piece};
use crate::training::model::classification_head;
use crate::training::schedule::{mean_round, sliding_windows};
use crate::transformer::xlnet::rel_shift;
use crate::transformer::{encode_stack, init_params, Dropout, EncoderConfig, Variant};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check { name, passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Weighted kappa straight from the count table.
fn kappa_from_counts(m: &ConfusionMatrix, quadratic: bool) -> f64 {
    let k = m.k();
    let n = m.total() as f64;
    let row: Vec<f64> = (0..k).map(|i| (0..k).map(|j| m.count(i, j) as f64).sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| m.count(i, j) as f64).sum()).collect();
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = if quadratic {
                ((i as f64 - j as f64) / (k as f64 - 1.0)).powi(2)
            } else if i == j {
                0.0
            } else {
                1.0
            };
            obs += w * m.count(i, j) as f64 / n;
            exp += w * row[i] * col[j] / (n * n);
        }
    }
    1.0 - obs / exp
}

fn kappa_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut tested = 0;
    for _ in 0..200 {
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(5..60);
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let m = confusion(&a, &b, k)?;
        let (Ok(q), Ok(c)) = (qwk(&m), cohen_kappa(&m)) else { continue };
        worst = worst.max((q - kappa_from_counts(&m, true)).abs()).max((c - kappa_from_counts(&m, false)).abs());
        tested += 1;
    }
    let ident = qwk(&confusion(&[0, 1, 2, 3], &[0, 1, 2, 3], 4)?)?;
    Ok(Check::new(
        "kappa",
        worst < 1e-12 && ident == 1.0,
        format!("{tested} tables, max deviation {worst:.1e}, identity {ident}"),
    ))
}

fn shift_oracle(x: &Tensor) -> Vec<f64> {
    let (q, r) = (x.rows(), x.cols());
    let mut padded = Vec::with_capacity(q * (r + 1));
    for row in x.to_rows() {
        padded.push(0.0);
        padded.extend(row);
    }
    padded[q..].to_vec()
}

fn shift_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut shapes = 0;
    let mut ok = true;
    for q in 1..=8 {
        for r in 1..=12 {
            let x = Tensor::randn(&[q, r], 1.0, &mut rng);
            ok &= rel_shift(&x)?.data() == shift_oracle(&x).as_slice();
            shapes += 1;
        }
    }
    Ok(Check::new("rel-shift", ok, format!("{shapes} shapes")))
}

fn tfidf_check() -> Result<Check> {
    let m = fit_tfidf(["a b a", "a c", "b b b c"], 1.0)?;
    let v = vectorize("a b a", &m);
    let want = [0.8944, 0.4472, 0.0];
    let err = v.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(Check::new("tfidf", err < 1e-4, format!("{v:.4?}")))
}

fn window_check() -> Result<Check> {
    let counts: Vec<usize> = [1, 510, 511, 600, 1020, 1200]
        .iter()
        .map(|&n| sliding_windows(n, 510).map(|w| w.len()))
        .collect::<Result<_>>()?;
    let ok = counts == [1, 1, 2, 2, 2, 3] && mean_round(&[2, 3], 4)? == 3 && mean_round(&[1, 1, 2], 4)? == 1;
    Ok(Check::new("windows", ok, format!("window counts {counts:?}")))
}

fn cec_check() -> Result<Check> {
    let cfg = LstmConfig {
        vocab_size: 4,
        embed_dim: 3,
        hidden: 4,
        layers: 1,
        num_labels: 2,
        pooling: crate::lstm::Pooling::Final,
        forget_bias: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = lstm_params(&cfg, &mut rng)?;
    store.set_value(&gate_name(0, "input", "b"), Tensor::full(&[4], -1e4))?;
    store.set_value(&gate_name(0, "forget", "b"), Tensor::full(&[4], 1e4))?;
    let start = Tensor::randn(&[1, 4], 1.0, &mut rng);
    let mut state = LstmState { cell: start.clone(), hidden: Tensor::zeros(&[1, 4]), time: 0 };
    for _ in 0..100 {
        state = lstm_cell_eval(&Tensor::randn(&[1, 3], 0.1, &mut rng), &state, &store, 0)?;
    }
    let drift = state.cell.max_abs_diff(&start);
    Ok(Check::new("cec", drift < 1e-12, format!("drift {drift:.1e} over 100 steps")))
}

fn gradient_check() -> Result<Check> {
    let cfg = EncoderConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        ffn_dim: 12,
        vocab_size: 10,
        max_len: 8,
        mem_len: 0,
        dropout: 0.0,
        pos_denominator: None,
    };
    let mut worst = 0.0f64;
    for variant in [Variant::Bert, Variant::Xlnet] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = init_params(&cfg, variant, 3, &mut rng)?;
        let pieces: Vec<Piece> = [5, 6, 7, 8].iter().map(|&id| Piece { id, word_start: true }).collect();
        let seq = wrap(&pieces, cfg.max_len, variant.cls_placement())?;
        let loss = |g: &mut Graph, s: &crate::params::ParamStore| {
            let out = encode_stack(g, s, &cfg, variant, &seq, None, cfg.layers, &mut Dropout::eval())?;
            let logits = classification_head(g, s, out.pooled)?;
            g.cross_entropy(logits, &[1])
        };
        let report = grad_check_sampled(loss, &store, 1e-5, 1e-4, 6)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(Check::new("gradients", worst < 1e-4, format!("max relative error {worst:.1e}")))
}

pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![kappa_check()?, shift_check()?, tfidf_check()?, window_check()?, cec_check()?, gradient_check()?])
}
