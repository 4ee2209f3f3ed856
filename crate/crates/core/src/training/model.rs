//! Trainable essay scorers and their conversion to and from checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::bow::{self, TfidfModel};
use crate::checkpoint::Checkpoint;
use crate::corpus::{default_stoplist, remove_stopwords};
use crate::error::{Error, Result};
use crate::lstm::{self, LstmConfig, Pooling};
use crate::ops::{self, Activation};
use crate::params::ParamStore;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{wrap, EncodedSeq, Vocab};
use crate::transformer::{self, encode_stack, Dropout, EncoderConfig, Memory, Variant};

use super::schedule::{mean_round, param_group, sliding_windows, ParamGroup, TrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Bow,
    Lstm,
    Bert,
    Xlnet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Bow, ModelKind::Lstm, ModelKind::Bert, ModelKind::Xlnet];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bow => "bow",
            ModelKind::Lstm => "lstm",
            ModelKind::Bert => "bert",
            ModelKind::Xlnet => "xlnet",
        }
    }

    /// Fine-tuning rate for models trained from scratch at desk scale.
    pub fn default_lr(self) -> f64 {
        match self {
            ModelKind::Bow => 0.05,
            ModelKind::Lstm => 1e-2,
            ModelKind::Bert | ModelKind::Xlnet => 3e-3,
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            ModelKind::Bert => Some(Variant::Bert),
            ModelKind::Xlnet => Some(Variant::Xlnet),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (bow | lstm | bert | xlnet)")))
    }
}

/// Architecture hyperparameters shared by every model kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Tokens per window, special tokens included.
    pub max_len: usize,
    pub mem_len: usize,
    pub dropout: f64,
    pub pos_denominator: Option<f64>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub lstm_pooling: Pooling,
    pub vocab_size: usize,
    pub tfidf_cutoff: f64,
}

impl ModelConfig {
    pub fn desk(kind: ModelKind) -> Self {
        let enc = EncoderConfig::desk(2000);
        ModelConfig {
            kind,
            dim: enc.dim,
            heads: enc.heads,
            layers: enc.layers,
            ffn_dim: enc.ffn_dim,
            max_len: enc.max_len,
            mem_len: enc.mem_len,
            dropout: enc.dropout,
            pos_denominator: None,
            lstm_hidden: 32,
            lstm_layers: 1,
            lstm_pooling: Pooling::Final,
            vocab_size: 2000,
            tfidf_cutoff: bow::DEFAULT_CUTOFF,
        }
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_len: self.max_len,
            mem_len: self.mem_len,
            dropout: self.dropout,
            pos_denominator: self.pos_denominator,
        }
    }

    pub fn lstm(&self, vocab_size: usize, num_labels: usize) -> LstmConfig {
        LstmConfig {
            vocab_size,
            embed_dim: self.dim,
            hidden: self.lstm_hidden,
            layers: self.lstm_layers,
            num_labels,
            pooling: self.lstm_pooling,
            forget_bias: 1.0,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self.kind {
            ModelKind::Bow => 0,
            ModelKind::Lstm => self.lstm_layers,
            ModelKind::Bert | ModelKind::Xlnet => self.layers,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Arch {
    Lstm(LstmConfig),
    Encoder(EncoderConfig, Variant),
}

/// One window of an essay in the form its model consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum WindowInput {
    Pieces(Vec<usize>),
    Seq(EncodedSeq),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub windows: Vec<WindowInput>,
    pub label: usize,
}

/// `dense_{R→k}` over the pooled representation.
pub fn classification_head(g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
    let w = g.param(store, transformer::HEAD_W)?;
    let b = g.param(store, transformer::HEAD_B)?;
    g.dense(pooled, w, b, Activation::Identity)
}

#[derive(Clone, Debug)]
pub struct NeuralModel {
    pub arch: Arch,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub num_labels: usize,
    /// Tokens per window, special tokens included for encoders.
    pub max_len: usize,
    pub layer_limit: usize,
    pub remove_stopwords: bool,
    pub average_probabilities: bool,
}

impl NeuralModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        vocab: Vocab,
        num_labels: usize,
        plan: &TrainPlan,
        rng: &mut R,
    ) -> Result<Self> {
        plan.validate(cfg.n_layers().max(1))?;
        let (arch, store) = match cfg.kind {
            ModelKind::Bow => return Err(Error::Config("the bag-of-words model is not neural".into())),
            ModelKind::Lstm => {
                let lc = cfg.lstm(vocab.len(), num_labels);
                let store = lstm::init_params(&lc, rng)?;
                (Arch::Lstm(lc), store)
            }
            ModelKind::Bert | ModelKind::Xlnet => {
                let variant = cfg.kind.variant().expect("encoder kind");
                let mut ec = cfg.encoder(vocab.len());
                if let Some(p) = plan.dropout {
                    ec.dropout = p;
                }
                let store = transformer::init_params(&ec, variant, num_labels, rng)?;
                (Arch::Encoder(ec, variant), store)
            }
        };
        if cfg.max_len < 3 {
            return Err(Error::Config(format!("max_len {} too small", cfg.max_len)));
        }
        Ok(NeuralModel {
            arch,
            vocab,
            store,
            num_labels,
            max_len: cfg.max_len,
            layer_limit: plan.active_layers(cfg.n_layers()),
            remove_stopwords: plan.remove_stopwords,
            average_probabilities: plan.average_probabilities,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match &self.arch {
            Arch::Lstm(_) => ModelKind::Lstm,
            Arch::Encoder(_, Variant::Bert) => ModelKind::Bert,
            Arch::Encoder(_, Variant::Xlnet) => ModelKind::Xlnet,
        }
    }

    pub fn n_layers(&self) -> usize {
        match &self.arch {
            Arch::Lstm(c) => c.layers,
            Arch::Encoder(c, _) => c.layers,
        }
    }

    pub fn dropout(&self) -> f64 {
        match &self.arch {
            Arch::Lstm(_) => 0.0,
            Arch::Encoder(c, _) => c.dropout,
        }
    }

    /// Content tokens per window.
    pub fn window(&self) -> usize {
        match self.arch {
            Arch::Lstm(_) => self.max_len,
            Arch::Encoder(..) => self.max_len - 2,
        }
    }

    pub fn prepare(&self, text: &str) -> Result<Vec<WindowInput>> {
        let filtered;
        let text = if self.remove_stopwords {
            filtered = remove_stopwords(text, &default_stoplist());
            filtered.as_str()
        } else {
            text
        };
        let pieces = self.vocab.tokenize(text);
        if pieces.is_empty() {
            return Err(Error::Empty("essay has no tokens".into()));
        }
        sliding_windows(pieces.len(), self.window())?
            .into_iter()
            .map(|(a, b)| match &self.arch {
                Arch::Lstm(_) => Ok(WindowInput::Pieces(pieces[a..b].iter().map(|p| p.id).collect())),
                Arch::Encoder(_, v) => Ok(WindowInput::Seq(wrap(&pieces[a..b], self.max_len, v.cls_placement())?)),
            })
            .collect()
    }

    pub fn example(&self, text: &str, label: usize) -> Result<Example> {
        if label >= self.num_labels {
            return Err(Error::OutOfRange(format!("label {label} with {} labels", self.num_labels)));
        }
        Ok(Example { windows: self.prepare(text)?, label })
    }

    /// Logits for every window, carrying XLNet memory across the windows of one essay.
    pub fn essay_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[WindowInput],
        drop: &mut Dropout,
    ) -> Result<Vec<Var>> {
        let mut memory: Option<Memory> = None;
        let mut out = Vec::with_capacity(windows.len());
        for w in windows {
            let logits = match (&self.arch, w) {
                (Arch::Lstm(c), WindowInput::Pieces(ids)) => lstm::lstm_forward(g, store, c, ids, ids.len())?,
                (Arch::Encoder(c, v), WindowInput::Seq(seq)) => {
                    let mem = memory.as_ref().filter(|m| !m.is_empty());
                    let o = encode_stack(g, store, c, *v, seq, mem, self.layer_limit, drop)?;
                    if c.mem_len > 0 {
                        memory = o.memory;
                    }
                    classification_head(g, store, o.pooled)?
                }
                _ => return Err(Error::Consistency("window form does not match the model".into())),
            };
            out.push(logits);
        }
        Ok(out)
    }

    /// Mean window cross-entropy against the essay label.
    pub fn essay_loss(&self, g: &mut Graph, store: &ParamStore, ex: &Example, drop: &mut Dropout) -> Result<Var> {
        let logits = self.essay_logits(g, store, &ex.windows, drop)?;
        let losses = logits.into_iter().map(|l| g.cross_entropy(l, &[ex.label])).collect::<Result<Vec<_>>>()?;
        let n = losses.len() as f64;
        let total = g.sum_all(&losses)?;
        Ok(g.scale(total, 1.0 / n))
    }

    pub fn window_probabilities(&self, windows: &[WindowInput]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let logits = self.essay_logits(&mut g, &self.store, windows, &mut Dropout::eval())?;
        Ok(logits.into_iter().map(|l| ops::softmax_rows(g.value(l))).collect())
    }

    pub fn predict_windows(&self, windows: &[WindowInput]) -> Result<usize> {
        let probs = self.window_probabilities(windows)?;
        if self.average_probabilities {
            let mut mean = vec![0.0; self.num_labels];
            for p in &probs {
                for (m, v) in mean.iter_mut().zip(p.data()) {
                    *m += v / probs.len() as f64;
                }
            }
            return Ok(Tensor::row(mean).argmax_row(0));
        }
        let labels: Vec<usize> = probs.iter().map(|p| p.argmax_row(0)).collect();
        mean_round(&labels, self.num_labels)
    }

    pub fn predict(&self, text: &str) -> Result<usize> {
        self.predict_windows(&self.prepare(text)?)
    }

    /// Freezes pretraining heads and layers beyond the layer limit.
    pub fn freeze_unused(&mut self) {
        let limit = self.layer_limit;
        self.store.set_trainable_where(false, |n| match param_group(n) {
            ParamGroup::Pretraining => true,
            ParamGroup::Layer(l) => l >= limit,
            _ => false,
        });
    }
}

/// Predicted label for one essay: per-window argmax labels averaged and
/// rounded half away from zero.
pub fn predict_essay(model: &NeuralModel, text: &str) -> Result<usize> {
    model.predict(text)
}

#[derive(Clone, Debug)]
pub struct BowModel {
    pub tfidf: TfidfModel,
    pub store: ParamStore,
    pub num_labels: usize,
    pub remove_stopwords: bool,
}

impl BowModel {
    pub fn train<R: Rng + ?Sized>(
        texts: &[&str],
        labels: &[usize],
        num_labels: usize,
        cutoff: f64,
        plan: &TrainPlan,
        rng: &mut R,
    ) -> Result<(Self, Vec<f64>)> {
        let stop = default_stoplist();
        let docs: Vec<String> = texts
            .iter()
            .map(|t| if plan.remove_stopwords { remove_stopwords(t, &stop) } else { t.to_string() })
            .collect();
        let tfidf = bow::fit_tfidf(docs.iter().map(String::as_str), cutoff)?;
        let x = bow::vectorize_all(docs.iter().map(String::as_str), &tfidf);
        let fit = bow::train_bow_classifier(&x, labels, num_labels, plan.bow_epochs, plan.bow_lr, rng)?;
        Ok((BowModel { tfidf, store: fit.store, num_labels, remove_stopwords: plan.remove_stopwords }, fit.losses))
    }

    pub fn predict(&self, text: &str) -> Result<usize> {
        let doc = if self.remove_stopwords { remove_stopwords(text, &default_stoplist()) } else { text.to_string() };
        let x = Tensor::row(bow::vectorize(&doc, &self.tfidf));
        Ok(bow::bow_predict(&self.store, &x)?[0])
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Bow(BowModel),
    Neural(NeuralModel),
}

const IDF: &str = "bow.idf";

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Bow(_) => ModelKind::Bow,
            Model::Neural(m) => m.kind(),
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            Model::Bow(m) => m.num_labels,
            Model::Neural(m) => m.num_labels,
        }
    }

    pub fn predict(&self, text: &str) -> Result<usize> {
        match self {
            Model::Bow(m) => m.predict(text),
            Model::Neural(m) => m.predict(text),
        }
    }

    /// Checkpoint with the architecture in the config block plus `extra` entries.
    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut config = extra.clone();
        let mut set = |k: &str, v: String| {
            config.insert(k.to_string(), v);
        };
        set("model", self.kind().to_string());
        set("num_labels", self.num_labels().to_string());
        let (vocab, params) = match self {
            Model::Bow(m) => {
                set("remove_stopwords", m.remove_stopwords.to_string());
                set("tfidf_cutoff", m.tfidf.high_freq_cutoff.to_string());
                set("tfidf_smoothed", m.tfidf.smoothed.to_string());
                let mut params = m.store.clone();
                params.insert(IDF, Tensor::vector(m.tfidf.idf.clone()), false)?;
                (m.tfidf.words.clone(), params)
            }
            Model::Neural(m) => {
                set("max_len", m.max_len.to_string());
                set("layer_limit", m.layer_limit.to_string());
                set("remove_stopwords", m.remove_stopwords.to_string());
                set("average_probabilities", m.average_probabilities.to_string());
                match &m.arch {
                    Arch::Lstm(c) => {
                        set("dim", c.embed_dim.to_string());
                        set("lstm_hidden", c.hidden.to_string());
                        set("lstm_layers", c.layers.to_string());
                        set("lstm_pooling", if c.pooling == Pooling::Mean { "mean" } else { "final" }.into());
                        set("forget_bias", c.forget_bias.to_string());
                    }
                    Arch::Encoder(c, _) => {
                        set("dim", c.dim.to_string());
                        set("heads", c.heads.to_string());
                        set("layers", c.layers.to_string());
                        set("ffn_dim", c.ffn_dim.to_string());
                        set("mem_len", c.mem_len.to_string());
                        set("dropout", c.dropout.to_string());
                        set(
                            "pos_denominator",
                            c.pos_denominator.map_or_else(|| "default".to_string(), |d| d.to_string()),
                        );
                    }
                }
                (m.vocab.pieces().to_vec(), m.store.clone())
            }
        };
        Ok(Checkpoint { config, vocab, params })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ck.get("model")?.parse()?;
        let num_labels: usize = ck.parse("num_labels")?;
        let remove_stopwords: bool = ck.parse("remove_stopwords")?;
        if kind == ModelKind::Bow {
            let mut store = ck.params.clone();
            let idf = store.value(IDF)?.data().to_vec();
            let mut rebuilt = ParamStore::new();
            for (name, e) in store.iter() {
                if name != IDF {
                    rebuilt.insert(name, e.value.clone(), e.trainable)?;
                }
            }
            store = rebuilt;
            let tfidf = TfidfModel::new(ck.vocab.clone(), idf, ck.parse("tfidf_cutoff")?, ck.parse("tfidf_smoothed")?)?;
            return Ok(Model::Bow(BowModel { tfidf, store, num_labels, remove_stopwords }));
        }
        let vocab = Vocab::from_lines(&ck.vocab.join("\n"))?;
        let max_len: usize = ck.parse("max_len")?;
        let arch = match kind {
            ModelKind::Lstm => Arch::Lstm(LstmConfig {
                vocab_size: vocab.len(),
                embed_dim: ck.parse("dim")?,
                hidden: ck.parse("lstm_hidden")?,
                layers: ck.parse("lstm_layers")?,
                num_labels,
                pooling: match ck.get("lstm_pooling")? {
                    "mean" => Pooling::Mean,
                    _ => Pooling::Final,
                },
                forget_bias: ck.parse("forget_bias")?,
            }),
            _ => {
                let denom = ck.get("pos_denominator")?;
                let ec = EncoderConfig {
                    dim: ck.parse("dim")?,
                    heads: ck.parse("heads")?,
                    layers: ck.parse("layers")?,
                    ffn_dim: ck.parse("ffn_dim")?,
                    vocab_size: vocab.len(),
                    max_len,
                    mem_len: ck.parse("mem_len")?,
                    dropout: ck.parse("dropout")?,
                    pos_denominator: if denom == "default" { None } else { Some(ck.parse("pos_denominator")?) },
                };
                ec.validate()?;
                Arch::Encoder(ec, kind.variant().expect("encoder kind"))
            }
        };
        Ok(Model::Neural(NeuralModel {
            arch,
            vocab,
            store: ck.params.clone(),
            num_labels,
            max_len,
            layer_limit: ck.parse("layer_limit")?,
            remove_stopwords,
            average_probabilities: ck.parse("average_probabilities")?,
        }))
    }
}
