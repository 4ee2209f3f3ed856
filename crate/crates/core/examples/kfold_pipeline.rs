//! Five-fold train / select / validate loop for every model kind.
//!
//! cargo run --release --example kfold_pipeline -- [epochs]

use aesf::corpus::{kfold_splits, to_labels, ItemSpec};
use aesf::synth::{synthetic_essays, SynthSpec};
use aesf::tokenizer::Vocab;
use aesf::training::{kfold, ModelConfig, ModelKind, TrainPlan};

fn main() -> aesf::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let raw = synthetic_essays(&SynthSpec::new(1, 200, 3, 11))?;
    let essays = to_labels(&raw, &ItemSpec::new(1, 0, 3)?)?;
    let vocab = Vocab::build(essays.iter().map(|e| e.text.as_str()), 2000)?;
    let splits = kfold_splits(&raw, 1)?;
    println!("kind\tfold\tdev_qwk\tvalidation_qwk\tqwk_human");
    for kind in ModelKind::ALL {
        let plan = TrainPlan { epochs, base_lr: kind.default_lr(), seed: 1, ..TrainPlan::default() };
        let folds = kfold(&ModelConfig::desk(kind), Some(&vocab), &essays, &splits, 4, &plan)?;
        for f in &folds {
            println!("{kind}\t{}\t{:.4}\t{:.4}\t{:.4}", f.fold, f.dev_qwk, f.validation_qwk, f.report.qwk_human);
        }
        let mean = folds.iter().map(|f| f.validation_qwk).sum::<f64>() / folds.len() as f64;
        println!("{kind}\tmean\t\t{mean:.4}");
    }
    Ok(())
}
