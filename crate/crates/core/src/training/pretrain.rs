//! Toy-scale pretraining loops for the masked-LM and permutation-LM objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{adam_step, AdamConfig, ParamStore};
use crate::tape::Graph;
use crate::tokenizer::{mask_for_mlm, EncodedSeq};
use crate::transformer::bert::mlm_loss;
use crate::transformer::xlnet::{random_permutation, two_stream_forward};
use crate::transformer::{Dropout, EncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainPlan {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Masking rate for the masked-LM objective.
    pub mask_rate: f64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        PretrainPlan { steps: 500, lr: 1e-3, seed: 0, mask_rate: 0.15 }
    }
}

/// Mean permutation-LM loss of every sequence under each fixed permutation.
pub fn perm_lm_eval(
    store: &ParamStore,
    cfg: &EncoderConfig,
    corpus: &[Vec<usize>],
    perms: &[Vec<usize>],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for ids in corpus {
        for perm in perms.iter().filter(|p| p.len() == ids.len()) {
            let mut g = Graph::new();
            let out = two_stream_forward(&mut g, store, cfg, ids, perm, &mut Dropout::eval())?;
            total += g.value(out.loss).data()[0];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no sequence matches the evaluation permutations".into()));
    }
    Ok(total / n as f64)
}

/// One Adam step per sequence visit, each with a fresh permutation; returns
/// the per-step loss. `on_step` sees the step index and the updated store.
pub fn perm_lm_train(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    corpus: &[Vec<usize>],
    plan: &PretrainPlan,
    mut on_step: impl FnMut(usize, &ParamStore) -> Result<bool>,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("empty pretraining corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut losses = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let ids = &corpus[step % corpus.len()];
        let perm = random_permutation(ids.len(), &mut rng);
        let mut g = Graph::new();
        let mut drop = if cfg.dropout > 0.0 { Dropout::train(cfg.dropout, &mut rng) } else { Dropout::eval() };
        let out = two_stream_forward(&mut g, store, cfg, ids, &perm, &mut drop)?;
        losses.push(g.value(out.loss).data()[0]);
        let mut grads = g.backward(out.loss)?;
        grads.fill_missing(store);
        adam_step(store, &grads, |_| plan.lr, AdamConfig::default())?;
        if on_step(step + 1, store)? {
            break;
        }
    }
    Ok(losses)
}

/// Masked-LM training with a fresh mask per step; returns the per-step loss.
pub fn mlm_train(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    corpus: &[EncodedSeq],
    plan: &PretrainPlan,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("empty pretraining corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut losses = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let seq = &corpus[step % corpus.len()];
        let sample = mask_for_mlm(seq, plan.mask_rate, &mut rng)?;
        let mut g = Graph::new();
        let mut drop = if cfg.dropout > 0.0 { Dropout::train(cfg.dropout, &mut rng) } else { Dropout::eval() };
        let loss = mlm_loss(&mut g, store, cfg, seq, &sample, &mut drop)?;
        losses.push(g.value(loss).data()[0]);
        let mut grads = g.backward(loss)?;
        grads.fill_missing(store);
        adam_step(store, &grads, |_| plan.lr, AdamConfig::default())?;
    }
    Ok(losses)
}
