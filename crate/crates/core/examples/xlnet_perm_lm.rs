//! Permutation language modelling on a repeated 8-token sequence with the
//! two-stream XLNet-style encoder.
//!
//! cargo run --release --example xlnet_perm_lm -- [lr] [steps] [seed]

use aesf::training::pretrain::{perm_lm_eval, perm_lm_train, PretrainPlan};
use aesf::transformer::xlnet::random_permutation;
use aesf::transformer::{init_params, EncoderConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aesf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr = args.first().and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let cfg = EncoderConfig { vocab_size: 12, dropout: 0.0, ..EncoderConfig::desk(12) };
    let corpus = vec![vec![5, 6, 7, 8, 5, 6, 7, 8]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = init_params(&cfg, Variant::Xlnet, 2, &mut rng)?;
    let probe: Vec<Vec<usize>> = (0..16).map(|_| random_permutation(8, &mut rng)).collect();
    let plan = PretrainPlan { steps, lr, seed: seed + 1, ..PretrainPlan::default() };
    println!("initial held-permutation loss {:.4}", perm_lm_eval(&store, &cfg, &corpus, &probe)?);
    perm_lm_train(&mut store, &cfg, &corpus, &plan, |step, s| {
        if step % 10 == 0 {
            println!("step {step:4}  loss {:.4}", perm_lm_eval(s, &cfg, &corpus, &probe)?);
        }
        Ok(false)
    })?;
    Ok(())
}
