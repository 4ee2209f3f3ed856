use std::collections::BTreeMap;

use aesf::checkpoint::Checkpoint;
use aesf::corpus::{to_labels, ItemSpec, LabeledEssay};
use aesf::synth::{synthetic_essays, SynthSpec};
use aesf::tokenizer::Vocab;
use aesf::training::{predict_essays, train_model, Ensemble, EnsembleMode, Model, ModelConfig, ModelKind, TrainPlan};

fn essays() -> Vec<LabeledEssay> {
    let raw = synthetic_essays(&SynthSpec::new(1, 24, 2, 77)).unwrap();
    to_labels(&raw, &ItemSpec::new(1, 0, 2).unwrap()).unwrap()
}

fn small(kind: ModelKind) -> ModelConfig {
    ModelConfig { dim: 8, heads: 2, ffn_dim: 16, lstm_hidden: 8, max_len: 16, mem_len: 4, ..ModelConfig::desk(kind) }
}

fn trained(kind: ModelKind) -> Model {
    let es = essays();
    let vocab = Vocab::build(es.iter().map(|e| e.text.as_str()), 200).unwrap();
    let plan = TrainPlan { epochs: 2, bow_epochs: 20, base_lr: kind.default_lr(), seed: 5, ..TrainPlan::default() };
    train_model(&small(kind), Some(&vocab), &es[..16], &es[16..], 3, &plan).unwrap().model
}

#[test]
fn checkpoints_reproduce_predictions_for_every_kind() {
    let es = essays();
    for kind in ModelKind::ALL {
        let model = trained(kind);
        let extra = BTreeMap::from([("item".to_string(), "1".to_string())]);
        let bytes = model.to_checkpoint(&extra).unwrap().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.get("item").unwrap(), "1");
        let back = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(back.kind(), kind);
        assert_eq!(back.num_labels(), 3);
        assert_eq!(predict_essays(&model, &es).unwrap(), predict_essays(&back, &es).unwrap(), "{kind}");
        assert_eq!(back.to_checkpoint(&extra).unwrap().to_bytes().unwrap(), bytes, "{kind}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    for kind in [ModelKind::Bow, ModelKind::Xlnet] {
        let a = trained(kind).to_checkpoint(&BTreeMap::new()).unwrap().to_bytes().unwrap();
        let b = trained(kind).to_checkpoint(&BTreeMap::new()).unwrap().to_bytes().unwrap();
        assert_eq!(a, b, "{kind}");
    }
}

#[test]
fn ensemble_of_copies_equals_the_member() {
    let es = essays();
    let model = trained(ModelKind::Lstm);
    let single = predict_essays(&model, &es).unwrap();
    for mode in [EnsembleMode::MeanRound, EnsembleMode::Majority] {
        let ens = Ensemble::new(vec![model.clone(), model.clone(), model.clone()], mode, 1).unwrap();
        let combined: Vec<usize> = es.iter().map(|e| ens.predict(&e.text).unwrap()).collect();
        assert_eq!(combined, single);
    }
}

#[test]
fn ensemble_rejects_mismatched_label_counts() {
    let a = trained(ModelKind::Bow);
    let raw = synthetic_essays(&SynthSpec::new(1, 12, 3, 3)).unwrap();
    let es = to_labels(&raw, &ItemSpec::new(1, 0, 3).unwrap()).unwrap();
    let plan = TrainPlan { bow_epochs: 5, ..TrainPlan::default() };
    let b = train_model(&small(ModelKind::Bow), None, &es, &[], 4, &plan).unwrap().model;
    assert!(Ensemble::new(vec![a, b], EnsembleMode::Majority, 0).is_err());
}
