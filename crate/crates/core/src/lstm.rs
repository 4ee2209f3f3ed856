//! Gated recurrent scorer built around a constant error carousel (CEC).
//!
//! Each layer keeps a cell vector whose self-recurrence is a fixed identity
//! matrix with a linear transfer. Input, forget and output gates are logistic
//! layers fed by the current input and the previous gated output; gating is
//! elementwise. Training unrolls the whole sequence into one static graph and
//! backpropagates through it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::{Gradients, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Hidden state at the last real time step.
    Final,
    /// Mean of hidden states over time.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_labels: usize,
    pub pooling: Pooling,
    pub forget_bias: f64,
}

impl LstmConfig {
    pub fn desk(vocab_size: usize, num_labels: usize) -> Self {
        LstmConfig {
            vocab_size,
            embed_dim: 32,
            hidden: 32,
            layers: 1,
            num_labels,
            pooling: Pooling::Final,
            forget_bias: 1.0,
        }
    }
}

pub const EMBED: &str = "lstm.embed";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const GATES: [&str; 4] = ["input", "forget", "output", "candidate"];

pub fn gate_name(layer: usize, gate: &str, part: &str) -> String {
    format!("lstm.{layer}.{gate}.{part}")
}

pub fn cec_name(layer: usize) -> String {
    format!("lstm.{layer}.cec")
}

/// Fresh parameters. The CEC weights are registered frozen.
pub fn init_params<R: Rng + ?Sized>(cfg: &LstmConfig, rng: &mut R) -> Result<ParamStore> {
    if cfg.layers == 0 || cfg.hidden == 0 || cfg.num_labels < 2 {
        return Err(Error::Param(format!("invalid LSTM config {cfg:?}")));
    }
    let mut s = ParamStore::new();
    s.insert(EMBED, Tensor::randn(&[cfg.vocab_size, cfg.embed_dim], 0.1, rng), true)?;
    let h = cfg.hidden;
    for l in 0..cfg.layers {
        let input = if l == 0 { cfg.embed_dim } else { h };
        for gate in GATES {
            s.insert(gate_name(l, gate, "iw"), Tensor::randn(&[h, input], (1.0 / input as f64).sqrt(), rng), true)?;
            s.insert(gate_name(l, gate, "lw"), Tensor::randn(&[h, h], (1.0 / h as f64).sqrt(), rng), true)?;
            let bias = if gate == "forget" { cfg.forget_bias } else { 0.0 };
            s.insert(gate_name(l, gate, "b"), Tensor::full(&[h], bias), true)?;
        }
        s.insert(cec_name(l), Tensor::eye(h), false)?;
    }
    s.insert(HEAD_W, Tensor::randn(&[cfg.num_labels, h], (1.0 / h as f64).sqrt(), rng), true)?;
    s.insert(HEAD_B, Tensor::zeros(&[cfg.num_labels]), true)?;
    Ok(s)
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub cell: Var,
    pub hidden: Var,
}

fn gate(g: &mut Graph, store: &ParamStore, layer: usize, name: &str, x: Var, h: Var, f: Activation) -> Result<Var> {
    let iw = g.param(store, &gate_name(layer, name, "iw"))?;
    let lw = g.param(store, &gate_name(layer, name, "lw"))?;
    let b = g.param(store, &gate_name(layer, name, "b"))?;
    let from_input = g.matmul_nt(x, iw)?;
    let from_hidden = g.matmul_nt(h, lw)?;
    let z = g.add(from_input, from_hidden)?;
    let z = g.add_row(z, b)?;
    Ok(g.activation(z, f))
}

/// One step: `cell′ = f ∘ (CEC·cell) + i ∘ tanh(candidate)`, `hidden′ = o ∘ tanh(cell′)`.
pub fn lstm_cell(g: &mut Graph, store: &ParamStore, layer: usize, x: Var, state: StateVars) -> Result<StateVars> {
    let i = gate(g, store, layer, "input", x, state.hidden, Activation::Sigmoid)?;
    let f = gate(g, store, layer, "forget", x, state.hidden, Activation::Sigmoid)?;
    let o = gate(g, store, layer, "output", x, state.hidden, Activation::Sigmoid)?;
    let c = gate(g, store, layer, "candidate", x, state.hidden, Activation::Tanh)?;
    let cec = g.param(store, &cec_name(layer))?;
    let carried = g.matmul_nt(state.cell, cec)?;
    let kept = g.mul(f, carried)?;
    let written = g.mul(i, c)?;
    let cell = g.add(kept, written)?;
    let squashed = g.tanh(cell);
    let hidden = g.mul(o, squashed)?;
    Ok(StateVars { cell, hidden })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub cell: Tensor,
    pub hidden: Tensor,
    pub time: usize,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { cell: Tensor::zeros(&[1, hidden]), hidden: Tensor::zeros(&[1, hidden]), time: 0 }
    }
}

/// Forward-only cell application on plain tensors.
pub fn lstm_cell_eval(x: &Tensor, state: &LstmState, store: &ParamStore, layer: usize) -> Result<LstmState> {
    let h = store.value(&cec_name(layer))?.rows();
    if state.cell.len() != h || state.hidden.len() != h {
        return Err(Error::shape("lstm_cell", &[1, h], state.cell.shape()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let sv = StateVars { cell: g.constant(state.cell.clone()), hidden: g.constant(state.hidden.clone()) };
    let next = lstm_cell(&mut g, store, layer, xv, sv)?;
    Ok(LstmState { cell: g.value(next.cell).clone(), hidden: g.value(next.hidden).clone(), time: state.time + 1 })
}

/// Embeds `ids[..len]`, runs every layer over time from a zero state and
/// returns `1 × num_labels` logits. Positions from `len` on are ignored.
pub fn lstm_forward(g: &mut Graph, store: &ParamStore, cfg: &LstmConfig, ids: &[usize], len: usize) -> Result<Var> {
    let len = len.min(ids.len());
    if len == 0 {
        return Err(Error::Empty("LSTM input sequence is empty".into()));
    }
    let table = g.param(store, EMBED)?;
    let embedded = g.rows(table, &ids[..len])?;
    let mut inputs: Vec<Var> = (0..len).map(|t| g.slice_rows(embedded, t, t + 1)).collect::<Result<_>>()?;
    for layer in 0..cfg.layers {
        let zero = g.constant(Tensor::zeros(&[1, cfg.hidden]));
        let mut state = StateVars { cell: zero, hidden: zero };
        let mut outputs = Vec::with_capacity(len);
        for &x in &inputs {
            state = lstm_cell(g, store, layer, x, state)?;
            outputs.push(state.hidden);
        }
        inputs = outputs;
    }
    let pooled = match cfg.pooling {
        Pooling::Final => *inputs.last().expect("len > 0"),
        Pooling::Mean => {
            let total = g.sum_all(&inputs)?;
            g.scale(total, 1.0 / len as f64)
        }
    };
    let w = g.param(store, HEAD_W)?;
    let b = g.param(store, HEAD_B)?;
    g.dense(pooled, w, b, Activation::Identity)
}

pub fn lstm_logits(store: &ParamStore, cfg: &LstmConfig, ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = lstm_forward(&mut g, store, cfg, ids, ids.len())?;
    Ok(g.value(out).clone())
}

/// Mean cross-entropy over `(ids, label)` pairs and its gradients, with
/// every sequence fully unrolled.
pub fn lstm_bptt(store: &ParamStore, cfg: &LstmConfig, batch: &[(Vec<usize>, usize)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(batch.len());
    for (ids, label) in batch {
        let logits = lstm_forward(&mut g, store, cfg, ids, ids.len())?;
        losses.push(g.cross_entropy(logits, &[*label])?);
    }
    let total = g.sum_all(&losses)?;
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0], grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(h: usize) -> (LstmConfig, ParamStore) {
        let cfg = LstmConfig {
            vocab_size: 7,
            embed_dim: 3,
            hidden: h,
            layers: 1,
            num_labels: 3,
            pooling: Pooling::Final,
            forget_bias: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = init_params(&cfg, &mut rng).unwrap();
        (cfg, s)
    }

    fn set_bias(s: &mut ParamStore, gate: &str, v: f64) {
        let n = s.value(&gate_name(0, gate, "b")).unwrap().len();
        s.set_value(&gate_name(0, gate, "b"), Tensor::full(&[n], v)).unwrap();
    }

    #[test]
    fn saturated_gates_carry_cell_exactly() {
        let (_, mut s) = tiny(4);
        set_bias(&mut s, "input", -1e4);
        set_bias(&mut s, "forget", 1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = LstmState { cell: Tensor::randn(&[1, 4], 1.0, &mut rng), hidden: Tensor::zeros(&[1, 4]), time: 0 };
        let x = Tensor::randn(&[1, 3], 0.1, &mut rng);
        let next = lstm_cell_eval(&x, &start, &s, 0).unwrap();
        assert_eq!(next.cell, start.cell);
    }

    #[test]
    fn zero_everything_gives_zero_hidden() {
        let (_, mut s) = tiny(2);
        for gate in GATES {
            for part in ["iw", "lw", "b"] {
                let name = gate_name(0, gate, part);
                let shape = s.value(&name).unwrap().shape().to_vec();
                s.set_value(&name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let next = lstm_cell_eval(&Tensor::zeros(&[1, 3]), &LstmState::zeros(2), &s, 0).unwrap();
        assert_eq!(next.hidden.data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_hand_trace() {
        let cfg = LstmConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden: 1,
            layers: 1,
            num_labels: 2,
            pooling: Pooling::Final,
            forget_bias: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = init_params(&cfg, &mut rng).unwrap();
        // (iw, lw, b) per gate
        let vals = [
            ("input", 0.5, -0.3, 0.1),
            ("forget", 0.2, 0.4, 1.0),
            ("output", -0.7, 0.6, 0.0),
            ("candidate", 1.1, -0.2, 0.05),
        ];
        for (gname, iw, lw, b) in vals {
            s.set_value(&gate_name(0, gname, "iw"), Tensor::row(vec![iw])).unwrap();
            s.set_value(&gate_name(0, gname, "lw"), Tensor::row(vec![lw])).unwrap();
            s.set_value(&gate_name(0, gname, "b"), Tensor::vector(vec![b])).unwrap();
        }
        let (x, c0, h0) = (0.8, 0.25, -0.4);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = sig(0.5 * x - 0.3 * h0 + 0.1);
        let f = sig(0.2 * x + 0.4 * h0 + 1.0);
        let o = sig(-0.7 * x + 0.6 * h0);
        let cand = (1.1 * x - 0.2 * h0 + 0.05f64).tanh();
        let c1 = f * c0 + i * cand;
        let h1 = o * c1.tanh();
        let st = LstmState { cell: Tensor::row(vec![c0]), hidden: Tensor::row(vec![h0]), time: 0 };
        let next = lstm_cell_eval(&Tensor::row(vec![x]), &st, &s, 0).unwrap();
        assert!((next.cell.data()[0] - c1).abs() < 1e-14);
        assert!((next.hidden.data()[0] - h1).abs() < 1e-14);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (_, s) = tiny(3);
        assert!(s.value(&gate_name(0, "forget", "b")).unwrap().data().iter().all(|&b| b >= 1.0));
        assert!(!s.is_trainable(&cec_name(0)));
    }

    #[test]
    fn order_matters_and_padding_is_ignored() {
        let (cfg, s) = tiny(4);
        let a = lstm_logits(&s, &cfg, &[1, 2, 3]).unwrap();
        let b = lstm_logits(&s, &cfg, &[3, 2, 1]).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        let mut g = Graph::new();
        let padded = lstm_forward(&mut g, &s, &cfg, &[1, 2, 3, 0, 0], 3).unwrap();
        assert_eq!(g.value(padded), &a);
        assert!(lstm_logits(&s, &cfg, &[]).is_err());
    }

    #[test]
    fn single_step_gradients() {
        let (cfg, s) = tiny(3);
        let report = grad_check(
            |g, st| {
                let out = lstm_forward(g, st, &cfg, &[4], 1)?;
                g.cross_entropy(out, &[2])
            },
            &s,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let cfg = LstmConfig {
            vocab_size: 6,
            embed_dim: 3,
            hidden: 4,
            layers: 2,
            num_labels: 3,
            pooling: Pooling::Mean,
            forget_bias: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = init_params(&cfg, &mut rng).unwrap();
        let seq = [1usize, 5, 2, 2, 3];
        let report = grad_check(
            |g, st| {
                let out = lstm_forward(g, st, &cfg, &seq, seq.len())?;
                g.cross_entropy(out, &[1])
            },
            &s,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let (_, grads) = lstm_bptt(&s, &cfg, &[(seq.to_vec(), 1)]).unwrap();
        assert!(grads.iter().all(|(_, t)| t.all_finite()));
    }

    #[test]
    fn frozen_embedding_gets_zero_gradient() {
        let (cfg, mut s) = tiny(3);
        s.set_trainable(EMBED, false).unwrap();
        let (_, grads) = lstm_bptt(&s, &cfg, &[(vec![1, 2, 3], 0)]).unwrap();
        assert!(grads.get(EMBED).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
