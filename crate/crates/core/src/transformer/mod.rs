//! Transformer encoders built on the tape: a BERT-style stack with summed
//! absolute embeddings and an XLNet-style stack with relative positions,
//! segment-aware scores, recurrence memory and two-stream permutation LM.

pub mod attention;
pub mod bert;
pub mod xlnet;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::ops::{Activation, Mode};
use crate::params::ParamStore;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{ClsPlacement, EncodedSeq, RESERVED};

pub use attention::{attention_probs, multi_head, multi_head_bert, self_attention};
pub use xlnet::Memory;

/// Additive bias for a blocked query/key pair.
pub const BLOCKED: f64 = -10_000.0;
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Bert,
    Xlnet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bert => "bert",
            Variant::Xlnet => "xlnet",
        }
    }

    pub fn cls_placement(self) -> ClsPlacement {
        match self {
            Variant::Bert => ClsPlacement::First,
            Variant::Xlnet => ClsPlacement::Last,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bert" => Ok(Variant::Bert),
            "xlnet" => Ok(Variant::Xlnet),
            other => Err(Error::Config(format!("unknown encoder variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Model width `R`.
    pub dim: usize,
    /// Head count `L`.
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward inner width `R′`.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub mem_len: usize,
    pub dropout: f64,
    /// Denominator of the sinusoid exponent; `None` means `dim`.
    pub pos_denominator: Option<f64>,
}

impl EncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            dim: 32,
            heads: 4,
            layers: 2,
            ffn_dim: 64,
            vocab_size,
            max_len: 64,
            mem_len: 16,
            dropout: 0.1,
            pos_denominator: None,
        }
    }

    /// Base-size shapes (768 wide, 12 heads, 12 layers).
    pub fn base() -> Self {
        EncoderConfig {
            dim: 768,
            heads: 12,
            layers: 12,
            ffn_dim: 3072,
            vocab_size: 30522,
            max_len: 512,
            mem_len: 10,
            dropout: 0.1,
            pos_denominator: None,
        }
    }

    pub fn d_k(&self) -> usize {
        self.dim / self.heads
    }

    pub fn denominator(&self) -> f64 {
        self.pos_denominator.unwrap_or(self.dim as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len {} < 2", self.max_len)));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::Config(format!("vocab_size {} too small", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if matches!(self.pos_denominator, Some(d) if !(d > 0.0)) {
            return Err(Error::Config("pos_denominator must be positive".into()));
        }
        Ok(())
    }
}

/// Additive attention bias of shape `queries × keys` holding only `0` and [`BLOCKED`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    bias: Tensor,
}

impl AttnMask {
    pub fn from_fn(q: usize, k: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut bias = Tensor::zeros(&[q, k]);
        for i in 0..q {
            for j in 0..k {
                if !allowed(i, j) {
                    bias.set(i, j, BLOCKED);
                }
            }
        }
        AttnMask { bias }
    }

    pub fn open(q: usize, k: usize) -> Self {
        Self::from_fn(q, k, |_, _| true)
    }

    /// Blocks every key whose keep flag is `0`.
    pub fn padding(q: usize, keep: &[u8]) -> Self {
        Self::from_fn(q, keep.len(), |_, j| keep[j] != 0)
    }

    pub fn from_bias(bias: Tensor) -> Result<Self> {
        if bias.ndim() != 2 {
            return Err(Error::shape("attn_mask", bias.shape(), &[0, 0]));
        }
        if let Some(v) = bias.data().iter().find(|&&v| v != 0.0 && v != BLOCKED) {
            return Err(Error::Param(format!("mask value {v} is not 0 or {BLOCKED}")));
        }
        Ok(AttnMask { bias })
    }

    pub fn rows(&self) -> usize {
        self.bias.rows()
    }

    pub fn cols(&self) -> usize {
        self.bias.cols()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bias.get(i, j) == 0.0
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Blocked wherever either mask blocks.
    pub fn intersect(&self, other: &AttnMask) -> Result<Self> {
        if self.bias.shape() != other.bias.shape() {
            return Err(Error::shape("attn_mask_intersect", self.bias.shape(), other.bias.shape()));
        }
        Ok(Self::from_fn(self.rows(), self.cols(), |i, j| self.allowed(i, j) && other.allowed(i, j)))
    }

    /// Prepends `m` always-visible key columns (memory rows).
    pub fn with_memory(&self, m: usize) -> Self {
        Self::from_fn(self.rows(), m + self.cols(), |i, j| j < m || self.allowed(i, j - m))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self::from_fn(rows.len(), self.cols(), |i, j| self.allowed(rows[i], j))
    }
}

/// Dropout source threaded through a forward pass. Evaluation passes
/// carry no generator and leave activations untouched.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'r mut dyn RngCore) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn mode(&self) -> Mode {
        if self.rng.is_some() {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, Mode::Train, &mut **rng),
            _ => Ok(x),
        }
    }
}

pub fn layer_param(variant: Variant, layer: usize, part: &str) -> String {
    format!("{}.{layer}.{part}", variant.name())
}

pub fn head_param(layer: usize, head: usize, part: &str) -> String {
    format!("xlnet.{layer}.h{head}.{part}")
}

pub const POOL_W: &str = "pool.w";
pub const POOL_B: &str = "pool.b";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Fresh parameters for `variant`, including pretraining heads and a
/// `num_labels`-way classification head.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &EncoderConfig,
    variant: Variant,
    num_labels: usize,
    rng: &mut R,
) -> Result<ParamStore> {
    cfg.validate()?;
    if num_labels < 2 {
        return Err(Error::Param(format!("num_labels {num_labels} < 2")));
    }
    let (r, rf, v) = (cfg.dim, cfg.ffn_dim, cfg.vocab_size);
    let dk = cfg.d_k();
    let s_r = 1.0 / (r as f64).sqrt();
    let mut s = ParamStore::new();
    match variant {
        Variant::Bert => {
            s.insert(bert::WORD, Tensor::randn(&[v, r], s_r, rng), true)?;
            s.insert(bert::POS, Tensor::randn(&[cfg.max_len, r], 0.1, rng), true)?;
            s.insert(bert::SEG, Tensor::randn(&[2, r], 0.1, rng), true)?;
        }
        Variant::Xlnet => {
            s.insert(xlnet::WORD, Tensor::randn(&[v, r], s_r, rng), true)?;
            s.insert(xlnet::QUERY_INIT, Tensor::randn(&[1, r], 0.1, rng), true)?;
        }
    }
    for l in 0..cfg.layers {
        let name = |part: &str| layer_param(variant, l, part);
        match variant {
            Variant::Bert => {
                for p in ["q.w", "k.w", "v.w", "attn_out.w"] {
                    s.insert(name(p), Tensor::randn(&[r, r], s_r, rng), true)?;
                }
                s.insert(name("attn_out.b"), Tensor::zeros(&[r]), true)?;
            }
            Variant::Xlnet => {
                for h in 0..cfg.heads {
                    for p in ["q", "k", "v", "kpos"] {
                        s.insert(head_param(l, h, p), Tensor::randn(&[dk, r], s_r, rng), true)?;
                    }
                    s.insert(head_param(l, h, "o"), Tensor::randn(&[r, dk], s_r, rng), true)?;
                    s.insert(head_param(l, h, "bpos"), Tensor::zeros(&[dk]), true)?;
                    s.insert(head_param(l, h, "bseg"), Tensor::zeros(&[dk]), true)?;
                    s.insert(head_param(l, h, "seg"), Tensor::randn(&[2, dk], 1.0 / (dk as f64).sqrt(), rng), true)?;
                }
            }
        }
        s.insert(name("norm1.g"), Tensor::ones(&[r]), true)?;
        s.insert(name("norm1.b"), Tensor::zeros(&[r]), true)?;
        s.insert(name("ffn_in.w"), Tensor::randn(&[rf, r], s_r, rng), true)?;
        s.insert(name("ffn_in.b"), Tensor::zeros(&[rf]), true)?;
        s.insert(name("ffn_out.w"), Tensor::randn(&[r, rf], 1.0 / (rf as f64).sqrt(), rng), true)?;
        s.insert(name("ffn_out.b"), Tensor::zeros(&[r]), true)?;
        s.insert(name("norm2.g"), Tensor::ones(&[r]), true)?;
        s.insert(name("norm2.b"), Tensor::zeros(&[r]), true)?;
    }
    s.insert(POOL_W, Tensor::randn(&[r, r], s_r, rng), true)?;
    s.insert(POOL_B, Tensor::zeros(&[r]), true)?;
    s.insert(HEAD_W, Tensor::randn(&[num_labels, r], s_r, rng), true)?;
    s.insert(HEAD_B, Tensor::zeros(&[num_labels]), true)?;
    match variant {
        Variant::Bert => {
            s.insert(bert::MLM_BIAS, Tensor::zeros(&[v]), true)?;
            s.insert(bert::NSP_W, Tensor::randn(&[2, r], s_r, rng), true)?;
            s.insert(bert::NSP_B, Tensor::zeros(&[2]), true)?;
        }
        Variant::Xlnet => {
            s.insert(xlnet::LM_BIAS, Tensor::zeros(&[v]), true)?;
        }
    }
    Ok(s)
}

/// Position-wise `dense_{R′→R}(gelu(dense_{R→R′}(x)))`.
pub(crate) fn feed_forward(g: &mut Graph, store: &ParamStore, variant: Variant, layer: usize, x: Var) -> Result<Var> {
    let name = |part: &str| layer_param(variant, layer, part);
    let (wi, bi) = (g.param(store, &name("ffn_in.w"))?, g.param(store, &name("ffn_in.b"))?);
    let (wo, bo) = (g.param(store, &name("ffn_out.w"))?, g.param(store, &name("ffn_out.b"))?);
    let inner = g.dense(x, wi, bi, Activation::Gelu)?;
    g.dense(inner, wo, bo, Activation::Identity)
}

pub(crate) fn norm(
    g: &mut Graph,
    store: &ParamStore,
    variant: Variant,
    layer: usize,
    which: &str,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(store, &layer_param(variant, layer, &format!("{which}.g")))?;
    let beta = g.param(store, &layer_param(variant, layer, &format!("{which}.b")))?;
    g.feature_norm(x, gamma, beta, NORM_EPS)
}

/// `tanh(dense_{R→R}(h_first))`.
pub fn pooler(g: &mut Graph, store: &ParamStore, h_first: Var) -> Result<Var> {
    let w = g.param(store, POOL_W)?;
    let b = g.param(store, POOL_B)?;
    g.dense(h_first, w, b, Activation::Tanh)
}

pub struct StackOutput {
    /// Per-token outputs of the last layer run.
    pub hidden: Var,
    pub pooled: Var,
    /// Updated recurrence memory (XLNet only).
    pub memory: Option<Memory>,
}

/// Embeds `seq`, runs the first `layers` layers under the padding mask and
/// pools the classification position of the variant's convention.
pub fn encode_stack(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    variant: Variant,
    seq: &EncodedSeq,
    memory: Option<&Memory>,
    layers: usize,
    drop: &mut Dropout,
) -> Result<StackOutput> {
    if layers > cfg.layers {
        return Err(Error::Config(format!("layer limit {layers} exceeds {}", cfg.layers)));
    }
    if seq.ids.len() > cfg.max_len {
        return Err(Error::OutOfRange(format!("sequence of {} tokens exceeds max_len {}", seq.ids.len(), cfg.max_len)));
    }
    if seq.true_length == 0 {
        return Err(Error::Empty("sequence has no real tokens".into()));
    }
    let s = seq.ids.len();
    let padding = AttnMask::padding(s, &seq.attention_keep);
    let (hidden, memory) = match variant {
        Variant::Bert => {
            if memory.is_some() {
                return Err(Error::Config("the BERT stack has no recurrence memory".into()));
            }
            let mut x = bert::embed_input(g, store, cfg, &seq.ids, &seq.segment_ids)?;
            for l in 0..layers {
                x = bert::bert_layer(g, store, cfg, l, x, &padding, drop)?;
            }
            (x, None)
        }
        Variant::Xlnet => {
            let (x, mem) = xlnet::content_stack(g, store, cfg, seq, memory, layers, &padding, drop)?;
            (x, Some(mem))
        }
    };
    let cls = g.slice_rows(hidden, seq.cls_position(), seq.cls_position() + 1)?;
    let pooled = pooler(g, store, cls)?;
    Ok(StackOutput { hidden, pooled, memory })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gradcheck::grad_check_sampled;
    use crate::tokenizer::wrap;
    use crate::tokenizer::Piece;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small(layers: usize) -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            heads: 2,
            layers,
            ffn_dim: 12,
            vocab_size: 12,
            max_len: 10,
            mem_len: 4,
            dropout: 0.0,
            pos_denominator: None,
        }
    }

    pub(crate) fn seq(ids: &[usize], max_len: usize, variant: Variant) -> EncodedSeq {
        let pieces: Vec<Piece> = ids.iter().map(|&id| Piece { id, word_start: true }).collect();
        wrap(&pieces, max_len, variant.cls_placement()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::desk(100).validate().is_ok());
        assert!(EncoderConfig::base().validate().is_ok());
        assert_eq!(EncoderConfig::base().d_k(), 64);
        let mut c = EncoderConfig::desk(100);
        c.heads = 5;
        assert!(c.validate().is_err());
        c = EncoderConfig::desk(100);
        c.max_len = 1;
        assert!(c.validate().is_err());
        assert_eq!("xlnet".parse::<Variant>().unwrap(), Variant::Xlnet);
        assert!("gpt".parse::<Variant>().is_err());
    }

    #[test]
    fn mask_helpers() {
        let m = AttnMask::padding(2, &[1, 1, 0]);
        assert!(m.allowed(1, 1) && !m.allowed(0, 2));
        let w = m.with_memory(2);
        assert_eq!(w.cols(), 5);
        assert!(w.allowed(0, 0) && !w.allowed(0, 4));
        assert!(AttnMask::from_bias(Tensor::full(&[1, 1], -5.0)).is_err());
        let tri = AttnMask::from_fn(3, 3, |i, j| j <= i);
        assert!(!tri.intersect(&m.with_memory(0).select_rows(&[0, 1, 1])).unwrap().allowed(2, 2));
    }

    #[test]
    fn dropout_context_is_identity_in_eval() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3]));
        let mut d = Dropout::eval();
        assert_eq!(d.mode(), Mode::Eval);
        let y = d.apply(&mut g, x).unwrap();
        assert_eq!(x, y);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dropout::train(0.5, &mut rng);
        let y = d.apply(&mut g, x).unwrap();
        assert!(g.value(y).data().contains(&0.0));
    }

    #[test]
    fn base_preset_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = EncoderConfig::base();
        cfg.layers = 1;
        cfg.vocab_size = 50;
        cfg.max_len = 8;
        let s = init_params(&cfg, Variant::Bert, 4, &mut rng).unwrap();
        assert_eq!(s.value("bert.0.ffn_in.w").unwrap().shape(), &[3072, 768]);
        assert_eq!(s.value("bert.0.ffn_out.w").unwrap().shape(), &[768, 3072]);
        let x = init_params(&cfg, Variant::Xlnet, 4, &mut rng).unwrap();
        assert_eq!(x.value("xlnet.0.h11.q").unwrap().shape(), &[64, 768]);
        assert_eq!(x.value("xlnet.0.h0.o").unwrap().shape(), &[768, 64]);
    }

    #[test]
    fn zero_layers_pool_the_cls_embedding() {
        let cfg = small(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in [Variant::Bert, Variant::Xlnet] {
            let store = init_params(&cfg, variant, 3, &mut rng).unwrap();
            let sq = seq(&[5, 6, 7], 8, variant);
            let mut g = Graph::new();
            let out = encode_stack(&mut g, &store, &cfg, variant, &sq, None, 0, &mut Dropout::eval()).unwrap();
            let mut g2 = Graph::new();
            let emb = match variant {
                Variant::Bert => bert::embed_input(&mut g2, &store, &cfg, &sq.ids, &sq.segment_ids).unwrap(),
                Variant::Xlnet => {
                    let t = g2.param(&store, xlnet::WORD).unwrap();
                    g2.rows(t, &sq.ids).unwrap()
                }
            };
            let c = sq.cls_position();
            let cls = g2.slice_rows(emb, c, c + 1).unwrap();
            let p = pooler(&mut g2, &store, cls).unwrap();
            assert_eq!(g.value(out.pooled), g2.value(p));
        }
    }

    #[test]
    fn padding_is_invisible() {
        let cfg = small(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in [Variant::Bert, Variant::Xlnet] {
            let store = init_params(&cfg, variant, 3, &mut rng).unwrap();
            let short = seq(&[5, 9, 7], 5, variant);
            let long = seq(&[5, 9, 7], 10, variant);
            let run = |sq: &EncodedSeq| {
                let mut g = Graph::new();
                let o = encode_stack(&mut g, &store, &cfg, variant, sq, None, 2, &mut Dropout::eval()).unwrap();
                (g.value(o.pooled).clone(), g.value(o.hidden).clone())
            };
            let (pa, ha) = run(&short);
            let (pb, hb) = run(&long);
            assert!(pa.max_abs_diff(&pb) < 1e-9);
            for i in 0..short.true_length {
                for j in 0..cfg.dim {
                    assert!((ha.get(i, j) - hb.get(i, j)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pooler_range_zero_weights_and_gradients() {
        let cfg = small(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = init_params(&cfg, Variant::Bert, 3, &mut rng).unwrap();
        let h = Tensor::randn(&[1, 8], 3.0, &mut rng);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let p = pooler(&mut g, &store, hv).unwrap();
        assert!(g.value(p).data().iter().all(|v| v.abs() < 1.0));
        let report = grad_check_sampled(
            |g, st| {
                let hv = g.constant(h.clone());
                let p = pooler(g, st, hv)?;
                let sq = g.mul(p, p)?;
                Ok(g.sum(sq))
            },
            &store,
            1e-5,
            1e-6,
            usize::MAX,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        store.set_value(POOL_W, Tensor::zeros(&[8, 8])).unwrap();
        let mut g = Graph::new();
        let hv = g.constant(h);
        let p = pooler(&mut g, &store, hv).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_stacks_pass_gradient_checks() {
        let cfg = small(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for variant in [Variant::Bert, Variant::Xlnet] {
            let store = init_params(&cfg, variant, 3, &mut rng).unwrap();
            let sq = seq(&[5, 9, 7, 6], 8, variant);
            let report = grad_check_sampled(
                |g, st| {
                    let o = encode_stack(g, st, &cfg, variant, &sq, None, 2, &mut Dropout::eval())?;
                    let w = g.param(st, HEAD_W)?;
                    let b = g.param(st, HEAD_B)?;
                    let logits = g.dense(o.pooled, w, b, Activation::Identity)?;
                    g.cross_entropy(logits, &[1])
                },
                &store,
                1e-5,
                1e-4,
                24,
            )
            .unwrap();
            assert!(report.passed(), "{variant}: {report:?}");
        }
    }
}
