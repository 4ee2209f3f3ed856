//! Central-difference check of the full encoder stacks and the LSTM.
//!
//! cargo run --release --example gradient_check

use aesf::gradcheck::grad_check;
use aesf::lstm::{self, LstmConfig};
use aesf::tokenizer::{wrap, Piece};
use aesf::training::model::classification_head;
use aesf::transformer::{encode_stack, init_params, Dropout, EncoderConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> aesf::Result<()> {
    let cfg = EncoderConfig { max_len: 10, dropout: 0.0, ..EncoderConfig::desk(12) };
    let pieces: Vec<Piece> = [5, 9, 6, 11, 7].iter().map(|&id| Piece { id, word_start: true }).collect();
    for variant in [Variant::Bert, Variant::Xlnet] {
        let store = init_params(&cfg, variant, 3, &mut ChaCha8Rng::seed_from_u64(1))?;
        let seq = wrap(&pieces, cfg.max_len, variant.cls_placement())?;
        let report = grad_check(
            |g, s| {
                let out = encode_stack(g, s, &cfg, variant, &seq, None, cfg.layers, &mut Dropout::eval())?;
                let logits = classification_head(g, s, out.pooled)?;
                g.cross_entropy(logits, &[2])
            },
            &store,
            1e-5,
            1e-4,
        )?;
        println!("{:5}: {} coordinates, max rel err {:.2e}", variant.name(), report.coords_checked, report.max_rel_err);
    }
    let lc = LstmConfig::desk(12, 3);
    let store = lstm::init_params(&lc, &mut ChaCha8Rng::seed_from_u64(2))?;
    let report = grad_check(
        |g, s| {
            let logits = lstm::lstm_forward(g, s, &lc, &[5, 6, 7, 8, 9, 10], 6)?;
            g.cross_entropy(logits, &[1])
        },
        &store,
        1e-5,
        1e-4,
    )?;
    println!("lstm : {} coordinates, max rel err {:.2e}", report.coords_checked, report.max_rel_err);
    Ok(())
}
