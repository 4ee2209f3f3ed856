//! TF-IDF bag-of-words features and a multinomial logistic-regression baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::{adam_step, AdamConfig, ParamStore};
use crate::tape::Graph;
use crate::tensor::Tensor;

/// Lowercased alphanumeric runs.
pub fn bow_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfidfModel {
    /// Column order is lexicographic.
    pub words: Vec<String>,
    pub idf: Vec<f64>,
    pub high_freq_cutoff: f64,
    /// Set when some retained word occurs in every document and the
    /// smoothed `ln((1+N)/(1+df)) + 1` weighting was used instead of `ln(N/df)`.
    pub smoothed: bool,
    columns: HashMap<String, usize>,
}

pub const DEFAULT_CUTOFF: f64 = 0.9;

impl TfidfModel {
    pub fn new(words: Vec<String>, idf: Vec<f64>, high_freq_cutoff: f64, smoothed: bool) -> Result<Self> {
        if words.len() != idf.len() {
            return Err(Error::shape("tfidf", &[words.len()], &[idf.len()]));
        }
        let columns = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(TfidfModel { words, idf, high_freq_cutoff, smoothed, columns })
    }

    pub fn dim(&self) -> usize {
        self.words.len()
    }

    pub fn column(&self, word: &str) -> Option<usize> {
        self.columns.get(word).copied()
    }
}

/// Fits vocabulary and IDF weights, dropping words whose document frequency
/// exceeds `cutoff · N`.
pub fn fit_tfidf<'a>(docs: impl IntoIterator<Item = &'a str>, cutoff: f64) -> Result<TfidfModel> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::Param(format!("cutoff {cutoff} not in (0, 1]")));
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut n = 0usize;
    for doc in docs {
        n += 1;
        let unique: BTreeSet<String> = bow_tokens(doc).into_iter().collect();
        for w in unique {
            *df.entry(w).or_default() += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no documents".into()));
    }
    let limit = cutoff * n as f64;
    let kept: Vec<(String, usize)> = df.into_iter().filter(|(_, d)| *d as f64 <= limit).collect();
    if kept.is_empty() {
        return Err(Error::Empty("every word exceeds the frequency cutoff".into()));
    }
    let smoothed = kept.iter().any(|(_, d)| *d == n);
    let nf = n as f64;
    let idf = kept
        .iter()
        .map(|(_, d)| {
            let d = *d as f64;
            if smoothed {
                ((1.0 + nf) / (1.0 + d)).ln() + 1.0
            } else {
                (nf / d).ln()
            }
        })
        .collect();
    let words = kept.into_iter().map(|(w, _)| w).collect();
    TfidfModel::new(words, idf, cutoff, smoothed)
}

/// `tf·idf` with `tf = count / max count in the document`, L2-normalized.
/// A document without vocabulary words maps to the zero vector.
pub fn vectorize(doc: &str, model: &TfidfModel) -> Vec<f64> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for w in bow_tokens(doc) {
        *counts.entry(w).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    let mut v = vec![0.0; model.dim()];
    if max == 0 {
        return v;
    }
    for (w, c) in &counts {
        if let Some(j) = model.column(w) {
            v[j] = *c as f64 / max as f64 * model.idf[j];
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

pub fn vectorize_all<'a>(docs: impl IntoIterator<Item = &'a str>, model: &TfidfModel) -> Tensor {
    let rows: Vec<Vec<f64>> = docs.into_iter().map(|d| vectorize(d, model)).collect();
    if rows.is_empty() {
        return Tensor::zeros(&[0, model.dim()]);
    }
    Tensor::from_rows(&rows).expect("rows share the vocabulary width")
}

#[derive(Clone, Debug)]
pub struct BowFit {
    pub store: ParamStore,
    pub losses: Vec<f64>,
}

impl BowFit {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&f64::NAN)
    }
}

pub const W: &str = "bow.w";
pub const B: &str = "bow.b";

/// Softmax regression (`dense → softmax → cross-entropy`) trained full-batch with Adam.
pub fn train_bow_classifier<R: Rng + ?Sized>(
    x: &Tensor,
    labels: &[usize],
    k: usize,
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<BowFit> {
    if k < 2 {
        return Err(Error::Param("need at least two classes".into()));
    }
    if x.ndim() != 2 || x.rows() != labels.len() {
        return Err(Error::shape("train_bow_classifier", x.shape(), &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no training rows".into()));
    }
    let d = x.cols();
    let mut store = ParamStore::new();
    store.insert(W, Tensor::randn(&[k, d], 0.01, rng), true)?;
    store.insert(B, Tensor::zeros(&[k]), true)?;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (w, b) = (g.param(&store, W)?, g.param(&store, B)?);
        let logits = g.dense(xv, w, b, Activation::Identity)?;
        let loss = g.cross_entropy(logits, labels)?;
        losses.push(g.value(loss).data()[0]);
        let grads = g.backward(loss)?;
        adam_step(&mut store, &grads, |_| lr, AdamConfig::default())?;
    }
    Ok(BowFit { store, losses })
}

pub fn bow_logits(store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    crate::ops::dense(x, store.value(W)?, store.value(B)?, Activation::Identity)
}

pub fn bow_predict(store: &ParamStore, x: &Tensor) -> Result<Vec<usize>> {
    let logits = bow_logits(store, x)?;
    Ok((0..logits.rows()).map(|i| logits.argmax_row(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DOCS: [&str; 3] = ["a b a", "a c", "b b b c"];

    #[test]
    fn idf_by_hand() {
        let m = fit_tfidf(DOCS, 1.0).unwrap();
        assert_eq!(m.words, ["a", "b", "c"]);
        assert!(!m.smoothed);
        for v in &m.idf {
            assert!((v - 1.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cutoff_drops_everything() {
        assert!(matches!(fit_tfidf(DOCS, 0.5), Err(Error::Empty(_))));
        assert!(fit_tfidf(DOCS, 0.0).is_err());
        assert!(fit_tfidf(DOCS, 1.5).is_err());
        assert!(fit_tfidf(Vec::<&str>::new(), 1.0).is_err());
    }

    #[test]
    fn single_document_is_smoothed() {
        let m = fit_tfidf(["x y"], 1.0).unwrap();
        assert!(m.smoothed);
        assert!(m.idf.iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn vectorize_by_hand() {
        let m = fit_tfidf(DOCS, 1.0).unwrap();
        let v = vectorize("a b a", &m);
        assert!((v[0] - 0.8944).abs() < 1e-4);
        assert!((v[1] - 0.4472).abs() < 1e-4);
        assert_eq!(v[2], 0.0);
        assert!(vectorize("zzz qqq", &m).iter().all(|&x| x == 0.0));
        let n: f64 = vectorize("c a c", &m).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separable_one_hot_classes() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = [0, 1, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fit = train_bow_classifier(&x, &y, 2, 50, 0.1, &mut rng).unwrap();
        assert_eq!(bow_predict(&fit.store, &x).unwrap(), y);
    }

    #[test]
    fn zero_features_learn_priors() {
        let x = Tensor::zeros(&[10, 3]);
        let y = [0, 0, 0, 0, 0, 0, 1, 1, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fit = train_bow_classifier(&x, &y, 3, 2000, 0.05, &mut rng).unwrap();
        let p = crate::ops::softmax_rows(&bow_logits(&fit.store, &x).unwrap());
        for (j, prior) in [0.6, 0.3, 0.1].iter().enumerate() {
            assert!((p.get(0, j) - prior).abs() < 1e-3, "{j}: {}", p.get(0, j));
        }
    }

    #[test]
    fn loss_trends_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[30, 5], 1.0, &mut rng);
        let y: Vec<usize> = (0..30).map(|i| (x.get(i, 0) > 0.0) as usize).collect();
        let fit = train_bow_classifier(&x, &y, 2, 100, 0.05, &mut rng).unwrap();
        let early: f64 = fit.losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = fit.losses[90..].iter().sum::<f64>() / 10.0;
        assert!(late < early);
    }
}
