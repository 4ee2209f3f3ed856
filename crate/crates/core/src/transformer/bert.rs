//! BERT-style pieces: summed embeddings, the post-norm encoder layer and
//! the masked-LM and next-sentence pretraining heads.

use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::ParamStore;
use crate::tape::{Graph, Var};
use crate::tokenizer::{ClsPlacement, EncodedSeq, MlmSample, Piece, CLS, PAD, SEP};

use super::{
    encode_stack, feed_forward, layer_param, multi_head_bert, norm, AttnMask, Dropout, EncoderConfig, Variant,
};

pub const WORD: &str = "bert.word";
pub const POS: &str = "bert.pos";
pub const SEG: &str = "bert.seg";
pub const MLM_BIAS: &str = "mlm.bias";
pub const NSP_W: &str = "nsp.w";
pub const NSP_B: &str = "nsp.b";

/// `word[id] + positional[position] + segment[segment_id]` per token.
pub fn embed_input(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    ids: &[usize],
    segs: &[usize],
) -> Result<Var> {
    if ids.len() != segs.len() {
        return Err(Error::shape("embed_input", &[ids.len()], &[segs.len()]));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::OutOfRange(format!("position {} ≥ max_len {}", ids.len() - 1, cfg.max_len)));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::OutOfRange(format!("token id {bad} ≥ vocab_size {}", cfg.vocab_size)));
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let word = g.param(store, WORD)?;
    let pos = g.param(store, POS)?;
    let seg = g.param(store, SEG)?;
    let w = g.rows(word, ids)?;
    let p = g.rows(pos, &positions)?;
    let s = g.rows(seg, segs)?;
    let wp = g.add(w, p)?;
    g.add(wp, s)
}

/// Post-norm layer: attention, output dense, dropout, residual, norm; then
/// feed-forward, dropout, residual, norm.
pub fn bert_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &AttnMask,
    drop: &mut Dropout,
) -> Result<Var> {
    let attn = multi_head_bert(g, store, cfg, layer, x, mask)?;
    let wo = g.param(store, &layer_param(Variant::Bert, layer, "attn_out.w"))?;
    let bo = g.param(store, &layer_param(Variant::Bert, layer, "attn_out.b"))?;
    let projected = g.dense(attn, wo, bo, Activation::Identity)?;
    let projected = drop.apply(g, projected)?;
    let res = g.add(x, projected)?;
    let h1 = norm(g, store, Variant::Bert, layer, "norm1", res)?;
    let ff = feed_forward(g, store, Variant::Bert, layer, h1)?;
    let ff = drop.apply(g, ff)?;
    let res = g.add(h1, ff)?;
    norm(g, store, Variant::Bert, layer, "norm2", res)
}

/// Cross-entropy of `H[positions]·tableᵀ + bias` against `targets`,
/// averaged over the target positions only.
pub fn mlm_head(g: &mut Graph, h: Var, table: Var, bias: Var, positions: &[usize], targets: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Empty("no masked-LM targets".into()));
    }
    if positions.len() != targets.len() {
        return Err(Error::shape("mlm_head", &[positions.len()], &[targets.len()]));
    }
    let picked = g.rows(h, positions)?;
    let logits = g.matmul_nt(picked, table)?;
    let logits = g.add_row(logits, bias)?;
    g.cross_entropy(logits, targets)
}

pub fn nsp_head(g: &mut Graph, store: &ParamStore, pooled: Var, label: usize) -> Result<Var> {
    if label > 1 {
        return Err(Error::OutOfRange(format!("next-sentence label {label}")));
    }
    let w = g.param(store, NSP_W)?;
    let b = g.param(store, NSP_B)?;
    let logits = g.dense(pooled, w, b, Activation::Identity)?;
    g.cross_entropy(logits, &[label])
}

/// Masked-LM loss for one masked sequence, decoding with the word table itself.
pub fn mlm_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    seq: &EncodedSeq,
    sample: &MlmSample,
    drop: &mut Dropout,
) -> Result<Var> {
    let mut masked = seq.clone();
    masked.ids.clone_from(&sample.ids);
    let out = encode_stack(g, store, cfg, Variant::Bert, &masked, None, cfg.layers, drop)?;
    let table = g.param(store, WORD)?;
    let bias = g.param(store, MLM_BIAS)?;
    mlm_head(g, out.hidden, table, bias, &sample.positions, &sample.targets)
}

/// `[CLS] a [SEP] b [SEP]` with segment ids 0 then 1, truncating the longer
/// side first until the pair fits.
pub fn encode_pair(a: &[Piece], b: &[Piece], max_len: usize) -> Result<EncodedSeq> {
    if max_len < 5 {
        return Err(Error::Param(format!("max_len {max_len} too small for a pair")));
    }
    let (mut na, mut nb) = (a.len(), b.len());
    while na + nb + 3 > max_len {
        if na >= nb {
            na -= 1;
        } else {
            nb -= 1;
        }
    }
    let mut ids = vec![CLS];
    let mut segs = vec![0];
    let mut starts = vec![true];
    for p in &a[..na] {
        ids.push(p.id);
        segs.push(0);
        starts.push(p.word_start);
    }
    ids.push(SEP);
    segs.push(0);
    starts.push(true);
    for p in &b[..nb] {
        ids.push(p.id);
        segs.push(1);
        starts.push(p.word_start);
    }
    ids.push(SEP);
    segs.push(1);
    starts.push(true);
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    segs.resize(max_len, 0);
    starts.resize(max_len, true);
    let mut keep = vec![1u8; true_length];
    keep.resize(max_len, 0);
    Ok(EncodedSeq {
        ids,
        attention_keep: keep,
        segment_ids: segs,
        true_length,
        word_start: starts,
        placement: ClsPlacement::First,
    })
}

pub fn nsp_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    pair: &EncodedSeq,
    label: usize,
    drop: &mut Dropout,
) -> Result<Var> {
    let out = encode_stack(g, store, cfg, Variant::Bert, pair, None, cfg.layers, drop)?;
    nsp_head(g, store, out.pooled, label)
}
