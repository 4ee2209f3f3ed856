//! Fine-tunes a from-scratch encoder (bert or xlnet) on one fold of a toy
//! corpus and prints the per-epoch history.
//!
//! cargo run --release --example finetune_encoder -- [bert|xlnet] [epochs] [--unfreeze] [--discriminative]

use aesf::corpus::{kfold_splits, to_labels, ItemSpec};
use aesf::synth::{synthetic_essays, SynthSpec};
use aesf::tokenizer::Vocab;
use aesf::training::{run_fold, LrSchedule, ModelConfig, ModelKind, TrainPlan};

fn main() -> aesf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind: ModelKind = args.first().map_or(Ok(ModelKind::Bert), |s| s.parse())?;
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let raw = synthetic_essays(&SynthSpec::new(1, 200, 3, 11))?;
    let essays = to_labels(&raw, &ItemSpec::new(1, 0, 3)?)?;
    let vocab = Vocab::build(essays.iter().map(|e| e.text.as_str()), 2000)?;
    let split = &kfold_splits(&raw, 1)?[0];
    let mut plan = TrainPlan { epochs, base_lr: kind.default_lr(), seed: 1, ..TrainPlan::default() };
    plan.gradual_unfreeze = args.iter().any(|a| a == "--unfreeze");
    if args.iter().any(|a| a == "--discriminative") {
        plan.lr_schedule = LrSchedule::Discriminative { xi: 0.95 };
    }
    let r = run_fold(&ModelConfig::desk(kind), Some(&vocab), &essays, split, 4, &plan)?;
    for s in &r.trained.history {
        println!("epoch {:3}  loss {:.4}  dev QWK {:.4}", s.epoch, s.loss, s.dev_qwk);
    }
    println!("{kind}: dev QWK {:.4}, validation QWK {:.4}", r.dev_qwk, r.validation_qwk);
    Ok(())
}
