//! XLNet-style machinery: sinusoidal relative positions with the relative
//! shift, segment-aware scores, recurrence memory, permutation masks and
//! two-stream attention for permutation language modeling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::tokenizer::EncodedSeq;

use super::{feed_forward, head_param, norm, AttnMask, Dropout, EncoderConfig, Variant};

pub const WORD: &str = "xlnet.word";
pub const QUERY_INIT: &str = "xlnet.query_init";
pub const LM_BIAS: &str = "xlnet.lm_bias";

/// Rows for distances `mem+seq, mem+seq−1, …, −seq+1`; each row is
/// `[sin(p·e_inv), cos(p·e_inv)]` with `e_inv[i] = 10000^(−2i/denominator)`.
pub fn rel_pos_encoding(seq_len: usize, mem_len: usize, dim: usize, denominator: f64) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Param(format!("positional width {dim} is odd")));
    }
    let half = dim / 2;
    let e_inv: Vec<f64> = (0..half).map(|i| 1.0 / 10000f64.powf((2 * i) as f64 / denominator)).collect();
    let rows = 2 * seq_len + mem_len;
    let top = (mem_len + seq_len) as f64;
    let mut out = Tensor::zeros(&[rows, dim]);
    for t in 0..rows {
        let p = top - t as f64;
        for (i, e) in e_inv.iter().enumerate() {
            out.set(t, i, (p * e).sin());
            out.set(t, half + i, (p * e).cos());
        }
    }
    Ok(out)
}

/// Flat source index of every output cell of the relative shift, `None`
/// where the output reads the zero padding column.
pub fn rel_shift_index(q: usize, r: usize) -> Vec<Option<usize>> {
    (0..q * r)
        .map(|o| {
            let p = q + o;
            let (row, col) = (p / (r + 1), p % (r + 1));
            (col > 0).then(|| row * r + col - 1)
        })
        .collect()
}

/// Pads a zero column in front, reads the buffer as `(r+1)×q`, drops the
/// first row and reads the rest back as `q×r`.
pub fn rel_shift(scores: &Tensor) -> Result<Tensor> {
    let (q, r) = (scores.rows(), scores.cols());
    let index = rel_shift_index(q, r);
    let data = index.iter().map(|i| i.map_or(0.0, |k| scores.data()[k])).collect();
    Tensor::new(vec![q, r], data)
}

pub fn rel_shift_var(g: &mut Graph, x: Var) -> Result<Var> {
    let (q, r) = (g.value(x).rows(), g.value(x).cols());
    let index = rel_shift_index(q, r);
    g.gather(x, vec![q, r], index)
}

/// Per-layer cached hidden states of earlier segments, detached from the graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Memory {
    pub layers: Vec<Tensor>,
}

impl Memory {
    pub fn rows(&self) -> usize {
        self.layers.first().map_or(0, |t| t.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }
}

/// Keeps the last `mem_len` rows of `old ++ new` for every layer.
pub fn update_memory(hiddens: &[Tensor], memory: Option<&Memory>, mem_len: usize) -> Result<Memory> {
    if let Some(m) = memory {
        if !m.layers.is_empty() && m.layers.len() != hiddens.len() {
            return Err(Error::shape("update_memory", &[m.layers.len()], &[hiddens.len()]));
        }
    }
    let mut layers = Vec::with_capacity(hiddens.len());
    for (l, h) in hiddens.iter().enumerate() {
        let dim = h.cols();
        let mut rows: Vec<&[f64]> = Vec::new();
        if let Some(old) = memory.and_then(|m| m.layers.get(l)) {
            if old.rows() > 0 && old.cols() != dim {
                return Err(Error::shape("update_memory", old.shape(), h.shape()));
            }
            rows.extend((0..old.rows()).map(|i| old.row_slice(i)));
        }
        rows.extend((0..h.rows()).map(|i| h.row_slice(i)));
        let keep = &rows[rows.len().saturating_sub(mem_len)..];
        let data: Vec<f64> = keep.iter().flat_map(|r| r.iter().copied()).collect();
        layers.push(Tensor::new(vec![keep.len(), dim], data)?);
    }
    Ok(Memory { layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// A token sees itself and everything earlier in the factorization order.
    Content,
    /// A token sees strictly earlier tokens only.
    Query,
}

pub fn perm_mask(perm: &[usize], seq_len: usize, stream: Stream) -> Result<AttnMask> {
    let mut rank = vec![usize::MAX; seq_len];
    if perm.len() != seq_len {
        return Err(Error::Param(format!("permutation of length {} for {seq_len} tokens", perm.len())));
    }
    for (r, &i) in perm.iter().enumerate() {
        if i >= seq_len || rank[i] != usize::MAX {
            return Err(Error::Param(format!("{perm:?} is not a permutation of 0..{seq_len}")));
        }
        rank[i] = r;
    }
    Ok(AttnMask::from_fn(seq_len, seq_len, |q, k| match stream {
        Stream::Content => rank[k] <= rank[q],
        Stream::Query => rank[k] < rank[q],
    }))
}

pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Row-major `queries × (mem + keys)` flags: memory rows always count as the
/// same segment.
pub fn segment_bits(query_segs: &[usize], mem_rows: usize, key_segs: &[usize]) -> Vec<bool> {
    query_segs
        .iter()
        .flat_map(|&qs| (0..mem_rows).map(|_| true).chain(key_segs.iter().map(move |&ks| ks == qs)))
        .collect()
}

/// Inputs shared by every head of one relative attention call.
pub struct RelAttn<'a> {
    /// `n × R` query-side hidden states.
    pub queries: Var,
    /// `(mem + S) × R` key/value source, memory rows first.
    pub context: Var,
    pub mem_rows: usize,
    pub seq_len: usize,
    /// `(2S + mem) × R` sinusoid table.
    pub pos_enc: Var,
    /// Positions of the query rows; `None` means rows `0..S`, aligned with
    /// the relative shift.
    pub query_pos: Option<&'a [usize]>,
    pub same_segment: &'a [bool],
    pub mask: &'a AttnMask,
}

/// Sum over heads of `softmax((content + positional + segment)/√d_k + mask)·V_l·W_lᴼᵀ`.
pub fn multi_head_xlnet(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    a: &RelAttn,
) -> Result<Var> {
    let (s, m) = (a.seq_len, a.mem_rows);
    let kv = m + s;
    let n = g.value(a.queries).rows();
    if m > cfg.mem_len {
        return Err(Error::OutOfRange(format!("memory of {m} rows exceeds mem_len {}", cfg.mem_len)));
    }
    if g.value(a.context).rows() != kv {
        return Err(Error::shape("multi_head_xlnet", g.shape(a.context), &[kv, cfg.dim]));
    }
    if g.value(a.pos_enc).rows() != 2 * s + m {
        return Err(Error::shape("multi_head_xlnet", g.shape(a.pos_enc), &[2 * s + m, cfg.dim]));
    }
    if a.mask.rows() != n || a.mask.cols() != kv || a.same_segment.len() != n * kv {
        return Err(Error::shape("multi_head_xlnet", &[a.mask.rows(), a.mask.cols()], &[n, kv]));
    }
    match a.query_pos {
        None if n != s => return Err(Error::shape("multi_head_xlnet", &[n], &[s])),
        Some(p) if p.len() != n || p.iter().any(|&i| i >= s) => {
            return Err(Error::OutOfRange(format!("query positions {p:?} for length {s}")))
        }
        _ => {}
    }
    let width = 2 * s + m;
    let pos_index: Option<Vec<Option<usize>>> = a.query_pos.map(|p| {
        p.iter().enumerate().flat_map(|(t, &pt)| (0..kv).map(move |j| Some(t * width + s - pt + j))).collect()
    });
    let seg_index: Vec<Option<usize>> = (0..n * kv).map(|c| Some((c / kv) * 2 + a.same_segment[c] as usize)).collect();
    let bias = g.constant(a.mask.bias().clone());
    let dk = cfg.d_k();
    let mut total: Option<Var> = None;
    for h in 0..cfg.heads {
        let p = |part: &str| head_param(layer, h, part);
        let wq = g.param(store, &p("q"))?;
        let wk = g.param(store, &p("k"))?;
        let wv = g.param(store, &p("v"))?;
        let wkp = g.param(store, &p("kpos"))?;
        let wo = g.param(store, &p("o"))?;
        let bpos = g.param(store, &p("bpos"))?;
        let bseg = g.param(store, &p("bseg"))?;
        let wseg = g.param(store, &p("seg"))?;

        let q = g.matmul_nt(a.queries, wq)?;
        let k = g.matmul_nt(a.context, wk)?;
        let v = g.matmul_nt(a.context, wv)?;
        let content = g.matmul_nt(q, k)?;

        let kp = g.matmul_nt(a.pos_enc, wkp)?;
        let qp = g.add_row(q, bpos)?;
        let full = g.matmul_nt(qp, kp)?;
        let positional = match &pos_index {
            None => {
                let shifted = rel_shift_var(g, full)?;
                g.slice_cols(shifted, 1, kv + 1)?
            }
            Some(index) => g.gather(full, vec![n, kv], index.clone())?,
        };

        let qs = g.add_row(q, bseg)?;
        let per_class = g.matmul_nt(qs, wseg)?;
        let segment = g.gather(per_class, vec![n, kv], seg_index.clone())?;

        let scores = g.add(content, positional)?;
        let scores = g.add(scores, segment)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let scores = g.add(scores, bias)?;
        let probs = g.softmax(scores);
        let head = g.matmul(probs, v)?;
        let out = g.matmul_nt(head, wo)?;
        total = Some(match total {
            None => out,
            Some(t) => g.add(t, out)?,
        });
    }
    total.ok_or_else(|| Error::Config("no attention heads".into()))
}

/// Attention with residual and norm, then feed-forward with residual and
/// norm; there is no separate output dense after attention.
pub fn xlnet_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    a: &RelAttn,
    drop: &mut Dropout,
) -> Result<Var> {
    let attn = multi_head_xlnet(g, store, cfg, layer, a)?;
    let attn = drop.apply(g, attn)?;
    let res = g.add(a.queries, attn)?;
    let h1 = norm(g, store, Variant::Xlnet, layer, "norm1", res)?;
    let ff = feed_forward(g, store, Variant::Xlnet, layer, h1)?;
    let ff = drop.apply(g, ff)?;
    let res = g.add(h1, ff)?;
    norm(g, store, Variant::Xlnet, layer, "norm2", res)
}

fn check_ids(cfg: &EncoderConfig, ids: &[usize]) -> Result<()> {
    match ids.iter().find(|&&i| i >= cfg.vocab_size) {
        Some(bad) => Err(Error::OutOfRange(format!("token id {bad} ≥ vocab_size {}", cfg.vocab_size))),
        None => Ok(()),
    }
}

/// Content stream over `seq` with optional memory. Returns the last hidden
/// states and the memory extended with each layer's real input rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn content_stack(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    seq: &EncodedSeq,
    memory: Option<&Memory>,
    layers: usize,
    padding: &AttnMask,
    drop: &mut Dropout,
) -> Result<(Var, Memory)> {
    check_ids(cfg, &seq.ids)?;
    let s = seq.ids.len();
    let m = memory.map_or(0, Memory::rows);
    if m > 0 && memory.is_some_and(|mem| mem.layers.len() < layers) {
        return Err(Error::shape("memory", &[memory.map_or(0, |x| x.layers.len())], &[layers]));
    }
    let table = g.param(store, WORD)?;
    let mut x = g.rows(table, &seq.ids)?;
    let pos_enc = g.constant(rel_pos_encoding(s, m, cfg.dim, cfg.denominator())?);
    let mask = padding.with_memory(m);
    let same = segment_bits(&seq.segment_ids, m, &seq.segment_ids);
    let mut inputs = Vec::with_capacity(layers);
    for l in 0..layers {
        let xv = g.value(x);
        let real = Tensor::new(vec![seq.true_length, cfg.dim], xv.data()[..seq.true_length * cfg.dim].to_vec())?;
        inputs.push(real);
        let context = match memory {
            Some(mem) if m > 0 => {
                let old = g.constant(mem.layers[l].clone());
                g.concat_rows(&[old, x])?
            }
            _ => x,
        };
        let attn = RelAttn {
            queries: x,
            context,
            mem_rows: m,
            seq_len: s,
            pos_enc,
            query_pos: None,
            same_segment: &same,
            mask: &mask,
        };
        x = xlnet_layer(g, store, cfg, l, &attn, drop)?;
    }
    let memory = update_memory(&inputs, memory, cfg.mem_len)?;
    Ok((x, memory))
}

/// `ceil(seq_len / 6)`, at least one.
pub fn num_targets(seq_len: usize) -> usize {
    seq_len.div_ceil(6).max(1)
}

pub const MIN_PERM_LEN: usize = 6;

pub struct TwoStream {
    pub loss: Var,
    /// Final query-stream rows, one per target.
    pub query_hidden: Var,
    /// Token positions predicted, in factorization order.
    pub targets: Vec<usize>,
}

/// Permutation-LM loss on the tokens that come last in `perm`.
pub fn two_stream_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    ids: &[usize],
    perm: &[usize],
    drop: &mut Dropout,
) -> Result<TwoStream> {
    let s = ids.len();
    if s < MIN_PERM_LEN {
        return Err(Error::Param(format!("sequence of {s} tokens is shorter than {MIN_PERM_LEN}")));
    }
    if s > cfg.max_len {
        return Err(Error::OutOfRange(format!("sequence of {s} tokens exceeds max_len {}", cfg.max_len)));
    }
    check_ids(cfg, ids)?;
    let content_mask = perm_mask(perm, s, Stream::Content)?;
    let targets = perm[s - num_targets(s)..].to_vec();
    let query_mask = perm_mask(perm, s, Stream::Query)?.select_rows(&targets);
    let same_c = vec![true; s * s];
    let same_q = vec![true; targets.len() * s];
    let pos_enc = g.constant(rel_pos_encoding(s, 0, cfg.dim, cfg.denominator())?);
    let table = g.param(store, WORD)?;
    let mut h = g.rows(table, ids)?;
    let init = g.param(store, QUERY_INIT)?;
    let mut q = g.rows(init, &vec![0; targets.len()])?;
    for l in 0..cfg.layers {
        let content = RelAttn {
            queries: h,
            context: h,
            mem_rows: 0,
            seq_len: s,
            pos_enc,
            query_pos: None,
            same_segment: &same_c,
            mask: &content_mask,
        };
        let query = RelAttn {
            queries: q,
            context: h,
            mem_rows: 0,
            seq_len: s,
            pos_enc,
            query_pos: Some(&targets),
            same_segment: &same_q,
            mask: &query_mask,
        };
        let next_h = xlnet_layer(g, store, cfg, l, &content, drop)?;
        q = xlnet_layer(g, store, cfg, l, &query, drop)?;
        h = next_h;
    }
    let bias = g.param(store, LM_BIAS)?;
    let logits = g.matmul_nt(q, table)?;
    let logits = g.add_row(logits, bias)?;
    let target_ids: Vec<usize> = targets.iter().map(|&p| ids[p]).collect();
    let loss = g.cross_entropy(logits, &target_ids)?;
    Ok(TwoStream { loss, query_hidden: q, targets })
}
