//! Long essays are split into overlapping windows; the essay score is the
//! rounded mean of the window scores.
//!
//! cargo run --example sliding_windows

use aesf::training::{mean_round, sliding_windows};

fn main() -> aesf::Result<()> {
    for n in [1, 510, 511, 600, 1020, 1200] {
        println!("{n:5} tokens -> {:?}", sliding_windows(n, 510)?);
    }
    for labels in [[2, 3].as_slice(), &[1, 1, 2], &[0, 1], &[3, 3, 2, 2]] {
        println!("window labels {labels:?} -> essay label {}", mean_round(labels, 4)?);
    }
    Ok(())
}
