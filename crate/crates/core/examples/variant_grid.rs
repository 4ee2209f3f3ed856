//! Fine-tuning variant grid through the library: each cell is the percentage
//! change in dev QWK over the base plan.
//!
//! cargo run --release --example variant_grid -- [epochs]

use aesf::corpus::{kfold_splits, to_labels, ItemSpec};
use aesf::synth::{synthetic_essays, SynthSpec};
use aesf::tokenizer::Vocab;
use aesf::training::{experiment_grid, run_fold, ModelConfig, ModelKind, TrainPlan, GRID_VARIANTS};

fn main() -> aesf::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let raw: Vec<_> = [1, 2]
        .into_iter()
        .flat_map(|item| synthetic_essays(&SynthSpec::new(item, 100, 3, 20 + item as u64)).unwrap())
        .collect();
    let vocab = Vocab::build(raw.iter().map(|e| e.text.as_str()), 2000)?;
    let cfg = ModelConfig::desk(ModelKind::Bert);
    let base = TrainPlan { epochs, base_lr: 3e-3, seed: 1, ..TrainPlan::default() };
    let table = experiment_grid(&[1, 2], &GRID_VARIANTS, &base, cfg.n_layers(), |item, plan| {
        let own: Vec<_> = raw.iter().filter(|e| e.item == item).cloned().collect();
        let essays = to_labels(&own, &ItemSpec::new(item, 0, 3)?)?;
        let split = &kfold_splits(&own, 1)?[0];
        Ok(run_fold(&cfg, Some(&vocab), &essays, split, 4, plan)?.dev_qwk)
    })?;
    print!("{}", table.to_tsv());
    Ok(())
}
