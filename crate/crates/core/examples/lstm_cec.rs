//! The constant error carousel: with the input gate shut and the forget gate
//! open, the cell state is carried unchanged; the identity CEC weight stays
//! fixed while the gates train.
//!
//! cargo run --release --example lstm_cec

use aesf::lstm::{cec_name, gate_name, init_params, lstm_bptt, lstm_cell_eval, LstmConfig, LstmState};
use aesf::{adam_step, AdamConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> aesf::Result<()> {
    let cfg = LstmConfig::desk(16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut saturated = init_params(&cfg, &mut rng)?;
    saturated.set_value(&gate_name(0, "input", "b"), Tensor::full(&[cfg.hidden], -1e4))?;
    saturated.set_value(&gate_name(0, "forget", "b"), Tensor::full(&[cfg.hidden], 1e4))?;
    let start = Tensor::randn(&[1, cfg.hidden], 1.0, &mut rng);
    let mut state = LstmState { cell: start.clone(), hidden: Tensor::zeros(&[1, cfg.hidden]), time: 0 };
    for _ in 0..100 {
        state = lstm_cell_eval(&Tensor::randn(&[1, cfg.embed_dim], 1.0, &mut rng), &state, &saturated, 0)?;
    }
    println!("cell drift after 100 saturated steps: {:.1e}", state.cell.max_abs_diff(&start));

    // Label 1 iff token 3 appears anywhere; the signal must survive the sequence.
    let batch: Vec<(Vec<usize>, usize)> = (0..32)
        .map(|_| {
            let ids: Vec<usize> = (0..12).map(|_| rng.gen_range(5..16)).collect();
            let mut ids = ids;
            let label = rng.gen_range(0..2);
            if label == 1 {
                ids[rng.gen_range(0..4)] = 3;
            }
            (ids, label)
        })
        .collect();
    let mut store = init_params(&cfg, &mut rng)?;
    let cec = store.value(&cec_name(0))?.clone();
    for step in 0..=150 {
        let (loss, mut grads) = lstm_bptt(&store, &cfg, &batch)?;
        if step % 30 == 0 {
            println!("step {step:3}  loss {loss:.4}");
        }
        grads.fill_missing(&store);
        adam_step(&mut store, &grads, |_| 1e-2, AdamConfig::default())?;
    }
    println!("CEC weight unchanged: {}", store.value(&cec_name(0))? == &cec);
    Ok(())
}
