//! TF-IDF bag-of-words features and a softmax-regression scorer on a toy corpus.
//!
//! cargo run --release --example tfidf_baseline

use aesf::bow::{bow_predict, fit_tfidf, train_bow_classifier, vectorize, vectorize_all};
use aesf::corpus::{to_labels, ItemSpec};
use aesf::metrics::{confusion, qwk};
use aesf::synth::{synthetic_essays, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aesf::Result<()> {
    let golden = fit_tfidf(["a b a", "a c", "b b b c"], 1.0)?;
    println!("\"a b a\" -> {:.4?}", vectorize("a b a", &golden));

    let raw = synthetic_essays(&SynthSpec::new(1, 200, 3, 5))?;
    let essays = to_labels(&raw, &ItemSpec::new(1, 0, 3)?)?;
    let (train, test) = essays.split_at(160);
    let model = fit_tfidf(train.iter().map(|e| e.text.as_str()), 0.9)?;
    println!("vocabulary width {}", model.dim());

    let x = vectorize_all(train.iter().map(|e| e.text.as_str()), &model);
    let y: Vec<usize> = train.iter().map(|e| e.label).collect();
    let fit = train_bow_classifier(&x, &y, 4, 300, 0.05, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("loss {:.3} -> {:.3}", fit.losses[0], fit.final_loss());

    let xt = vectorize_all(test.iter().map(|e| e.text.as_str()), &model);
    let pred = bow_predict(&fit.store, &xt)?;
    let gold: Vec<usize> = test.iter().map(|e| e.label).collect();
    println!("held-out QWK {:.4}", qwk(&confusion(&pred, &gold, 4)?)?);
    Ok(())
}
