//! Mean-round and majority-vote ensembles of separately trained models.
//!
//! cargo run --release --example ensemble -- [epochs]

use aesf::corpus::{kfold_splits, to_labels, ItemSpec, LabeledEssay};
use aesf::synth::{synthetic_essays, SynthSpec};
use aesf::tokenizer::Vocab;
use aesf::training::{selection_qwk, train_model, Ensemble, EnsembleMode, ModelConfig, ModelKind, TrainPlan};

fn pick(essays: &[LabeledEssay], ids: &[i64]) -> Vec<LabeledEssay> {
    essays.iter().filter(|e| ids.contains(&e.essay_id)).cloned().collect()
}

fn main() -> aesf::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let raw = synthetic_essays(&SynthSpec::new(1, 200, 3, 11))?;
    let essays = to_labels(&raw, &ItemSpec::new(1, 0, 3)?)?;
    let vocab = Vocab::build(essays.iter().map(|e| e.text.as_str()), 2000)?;
    let split = &kfold_splits(&raw, 1)?[0];
    let (train, dev, validation) =
        (pick(&essays, &split.train), pick(&essays, &split.test), pick(&essays, &split.validation));
    let gold: Vec<usize> = validation.iter().map(|e| e.label).collect();

    let mut members = Vec::new();
    for kind in [ModelKind::Bert, ModelKind::Xlnet, ModelKind::Lstm] {
        let plan = TrainPlan { epochs, base_lr: kind.default_lr(), seed: 1, ..TrainPlan::default() };
        let model = train_model(&ModelConfig::desk(kind), Some(&vocab), &train, &dev, 4, &plan)?.model;
        let pred = validation.iter().map(|e| model.predict(&e.text)).collect::<aesf::Result<Vec<_>>>()?;
        println!("{kind:6} validation QWK {:.4}", selection_qwk(&pred, &gold, 4)?);
        members.push(model);
    }
    for mode in [EnsembleMode::MeanRound, EnsembleMode::Majority] {
        let ens = Ensemble::new(members.clone(), mode, 0)?;
        let pred = validation.iter().map(|e| ens.predict(&e.text)).collect::<aesf::Result<Vec<_>>>()?;
        println!("{mode:10} validation QWK {:.4}", selection_qwk(&pred, &gold, 4)?);
    }
    Ok(())
}
