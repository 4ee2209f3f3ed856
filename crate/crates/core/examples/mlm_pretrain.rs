//! Masked-LM pretraining of the BERT-style encoder on a toy corpus, with the
//! output layer tied to the word embeddings.
//!
//! cargo run --release --example mlm_pretrain -- [steps]

use aesf::synth::{synthetic_essays, SynthSpec};
use aesf::tokenizer::{encode, Vocab};
use aesf::training::pretrain::{mlm_train, PretrainPlan};
use aesf::transformer::{init_params, EncoderConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aesf::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let essays = synthetic_essays(&SynthSpec::new(1, 40, 2, 9))?;
    let vocab = Vocab::build(essays.iter().map(|e| e.text.as_str()), 300)?;
    let cfg = EncoderConfig { dropout: 0.0, ..EncoderConfig::desk(vocab.len()) };
    let corpus = essays
        .iter()
        .map(|e| encode(&e.text, &vocab, cfg.max_len, Variant::Bert.cls_placement()))
        .collect::<aesf::Result<Vec<_>>>()?;
    let mut store = init_params(&cfg, Variant::Bert, 2, &mut ChaCha8Rng::seed_from_u64(1))?;
    let plan = PretrainPlan { steps, lr: 1e-3, seed: 2, ..PretrainPlan::default() };
    let losses = mlm_train(&mut store, &cfg, &corpus, &plan)?;
    for chunk in losses.chunks(steps.div_ceil(8).max(1)) {
        println!("mean loss {:.4}", chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    Ok(())
}
