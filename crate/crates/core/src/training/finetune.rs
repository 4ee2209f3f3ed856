//! Mini-batch fine-tuning with dev-set model selection, and the 5-fold driver.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{FoldSplit, LabeledEssay};
use crate::error::{Error, Result};
use crate::metrics::{self, compare_engine_to_human, AgreementReport};
use crate::params::{adam_step, AdamConfig, Gradients};
use crate::tape::Graph;
use crate::tokenizer::Vocab;
use crate::transformer::Dropout;

use super::model::{BowModel, Example, Model, ModelConfig, ModelKind, NeuralModel};
use super::schedule::{
    discriminative_lrs, gradual_unfreeze, group_lr, param_group, warmup_factor, LrSchedule, TrainPlan,
};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// QWK on the development set; `0` when undefined.
    pub dev_qwk: f64,
    /// Computed only when training stops on perfect training accuracy.
    pub train_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    /// Parameters from the epoch with the best development QWK.
    pub model: NeuralModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// QWK with an undefined kappa counted as no agreement.
pub fn selection_qwk(predicted: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    let m = metrics::confusion(predicted, gold, k)?;
    match metrics::qwk(&m) {
        Ok(v) => Ok(v),
        Err(Error::UndefinedKappa(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

pub fn predict_examples(model: &NeuralModel, examples: &[Example]) -> Result<Vec<usize>> {
    examples.par_iter().map(|ex| model.predict_windows(&ex.windows)).collect()
}

fn level_lrs(plan: &TrainPlan, active_layers: usize) -> Result<Vec<f64>> {
    match plan.lr_schedule {
        LrSchedule::Fixed => Ok(vec![plan.base_lr; active_layers + 1]),
        LrSchedule::Discriminative { xi } => discriminative_lrs(plan.base_lr, xi, active_layers + 1),
    }
}

fn example_grads(model: &NeuralModel, ex: &Example, seed: u64) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = model.dropout();
    let mut drop = if p > 0.0 { Dropout::train(p, &mut rng) } else { Dropout::eval() };
    let loss = model.essay_loss(&mut g, &model.store, ex, &mut drop)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?))
}

pub fn finetune(
    mut model: NeuralModel,
    train: &[Example],
    dev: &[Example],
    plan: &TrainPlan,
) -> Result<FinetuneResult> {
    if train.is_empty() {
        return Err(Error::Empty("no training examples".into()));
    }
    model.freeze_unused();
    let active = model.layer_limit;
    let base: BTreeSet<String> = model.store.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.to_string()).collect();
    let lrs = level_lrs(plan, active)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let dev_gold: Vec<usize> = dev.iter().map(|e| e.label).collect();

    let mut history = Vec::with_capacity(plan.epochs);
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut step = 0usize;
    for epoch in 1..=plan.epochs {
        if plan.gradual_unfreeze {
            let u = gradual_unfreeze(epoch, active)?;
            for name in &base {
                model.store.set_trainable(name, u.allows(param_group(name), active))?;
            }
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(plan.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let parts = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &s)| example_grads(&model, &train[i], s))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients::new();
            for (loss, g) in &parts {
                epoch_loss += loss;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            grads.fill_missing(&model.store);
            let warm = warmup_factor(step, plan.warmup_steps);
            adam_step(&mut model.store, &grads, |n| group_lr(param_group(n), &lrs) * warm, AdamConfig::default())?;
            step += 1;
        }
        let dev_qwk = if dev.is_empty() {
            0.0
        } else {
            selection_qwk(&predict_examples(&model, dev)?, &dev_gold, model.num_labels)?
        };
        let train_acc = if plan.stop_when_train_perfect {
            let pred = predict_examples(&model, train)?;
            let hits = pred.iter().zip(train).filter(|(p, e)| **p == e.label).count();
            Some(hits as f64 / train.len() as f64)
        } else {
            None
        };
        history.push(EpochStats { epoch, loss: epoch_loss / train.len() as f64, dev_qwk, train_acc });
        let improved = match &best {
            None => true,
            Some((q, _, _)) => dev.is_empty() || dev_qwk > *q,
        };
        if improved {
            best = Some((dev_qwk, epoch, model.store.clone()));
        }
        if train_acc == Some(1.0) {
            break;
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    for name in &base {
        model.store.set_trainable(name, true)?;
    }
    Ok(FinetuneResult { model, history, best_epoch })
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Trains any model kind on labeled essays. Neural models need `vocab`.
pub fn train_model(
    cfg: &ModelConfig,
    vocab: Option<&Vocab>,
    train: &[LabeledEssay],
    dev: &[LabeledEssay],
    num_labels: usize,
    plan: &TrainPlan,
) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    if cfg.kind == ModelKind::Bow {
        let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
        let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
        let (m, losses) = BowModel::train(&texts, &labels, num_labels, cfg.tfidf_cutoff, plan, &mut rng)?;
        let history = losses
            .into_iter()
            .enumerate()
            .map(|(i, loss)| EpochStats { epoch: i + 1, loss, dev_qwk: 0.0, train_acc: None })
            .collect();
        return Ok(Trained { model: Model::Bow(m), history });
    }
    let vocab = vocab.ok_or_else(|| Error::Config(format!("{} needs a vocabulary", cfg.kind)))?;
    let model = NeuralModel::new(cfg, vocab.clone(), num_labels, plan, &mut rng)?;
    let to_examples =
        |set: &[LabeledEssay]| set.iter().map(|e| model.example(&e.text, e.label)).collect::<Result<Vec<_>>>();
    let train_ex = to_examples(train)?;
    let dev_ex = to_examples(dev)?;
    let r = finetune(model, &train_ex, &dev_ex, plan)?;
    Ok(Trained { model: Model::Neural(r.model), history: r.history })
}

pub fn predict_essays(model: &Model, essays: &[LabeledEssay]) -> Result<Vec<usize>> {
    essays.par_iter().map(|e| model.predict(&e.text)).collect()
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub dev_qwk: f64,
    /// QWK of predictions against resolved labels on the held-out validation set.
    pub validation_qwk: f64,
    pub report: AgreementReport,
    /// `(essay_id, predicted label)` for the validation set.
    pub predictions: Vec<(i64, usize)>,
    pub trained: Trained,
}

fn select(by_id: &HashMap<i64, &LabeledEssay>, ids: &[i64]) -> Result<Vec<LabeledEssay>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|e| (*e).clone())
                .ok_or_else(|| Error::Consistency(format!("essay {id} missing from corpus")))
        })
        .collect()
}

/// Trains on the fold's training part, selects on its test part and
/// reports on its validation part. The fold seed is `plan.seed + fold`.
pub fn run_fold(
    cfg: &ModelConfig,
    vocab: Option<&Vocab>,
    essays: &[LabeledEssay],
    split: &FoldSplit,
    num_labels: usize,
    plan: &TrainPlan,
) -> Result<FoldResult> {
    let by_id: HashMap<i64, &LabeledEssay> = essays.iter().map(|e| (e.essay_id, e)).collect();
    let train = select(&by_id, &split.train)?;
    let dev = select(&by_id, &split.test)?;
    let validation = select(&by_id, &split.validation)?;
    let fold_plan = TrainPlan { seed: plan.seed.wrapping_add(split.fold as u64), ..plan.clone() };
    let trained = train_model(cfg, vocab, &train, &dev, num_labels, &fold_plan)?;
    let dev_gold: Vec<usize> = dev.iter().map(|e| e.label).collect();
    let dev_qwk = if dev.is_empty() {
        0.0
    } else {
        selection_qwk(&predict_essays(&trained.model, &dev)?, &dev_gold, num_labels)?
    };
    let pred = predict_essays(&trained.model, &validation)?;
    let gold: Vec<usize> = validation.iter().map(|e| e.label).collect();
    let r1: Vec<usize> = validation.iter().map(|e| e.rater1).collect();
    let r2: Vec<usize> = validation.iter().map(|e| e.rater2).collect();
    Ok(FoldResult {
        fold: split.fold,
        dev_qwk,
        validation_qwk: selection_qwk(&pred, &gold, num_labels)?,
        report: compare_engine_to_human(&r1, &r2, &pred, num_labels)?,
        predictions: validation.iter().map(|e| e.essay_id).zip(pred).collect(),
        trained,
    })
}

pub fn kfold(
    cfg: &ModelConfig,
    vocab: Option<&Vocab>,
    essays: &[LabeledEssay],
    splits: &[FoldSplit],
    num_labels: usize,
    plan: &TrainPlan,
) -> Result<Vec<FoldResult>> {
    splits.iter().map(|s| run_fold(cfg, vocab, essays, s, num_labels, plan)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{kfold_splits, to_labels, ItemSpec};
    use crate::synth::{synthetic_essays, SynthSpec};

    fn tiny_cfg(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
            max_len: 12,
            mem_len: 4,
            lstm_hidden: 8,
            ..ModelConfig::desk(kind)
        }
    }

    fn corpus(n: usize) -> (Vec<LabeledEssay>, Vocab) {
        let essays = synthetic_essays(&SynthSpec::new(1, n, 2, 3)).unwrap();
        let spec = ItemSpec::new(1, 0, 2).unwrap();
        let labeled = to_labels(&essays, &spec).unwrap();
        let vocab = Vocab::build(labeled.iter().map(|e| e.text.as_str()), 200).unwrap();
        (labeled, vocab)
    }

    #[test]
    fn undefined_kappa_counts_as_zero() {
        assert_eq!(selection_qwk(&[1, 1], &[1, 1], 3).unwrap(), 0.0);
        assert_eq!(selection_qwk(&[0, 2], &[0, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (essays, vocab) = corpus(12);
        let plan = TrainPlan { epochs: 2, batch_size: 4, seed: 5, ..TrainPlan::default() };
        for kind in [ModelKind::Lstm, ModelKind::Bert, ModelKind::Xlnet] {
            let cfg = tiny_cfg(kind);
            let a = train_model(&cfg, Some(&vocab), &essays[..8], &essays[8..], 3, &plan).unwrap();
            let b = train_model(&cfg, Some(&vocab), &essays[..8], &essays[8..], 3, &plan).unwrap();
            let (Model::Neural(ma), Model::Neural(mb)) = (&a.model, &b.model) else { panic!() };
            for (name, e) in ma.store.iter() {
                assert_eq!(&e.value, mb.store.value(name).unwrap(), "{kind} {name}");
            }
            assert_eq!(a.history, b.history);
        }
    }

    #[test]
    fn frozen_pretraining_heads_do_not_move() {
        let (essays, vocab) = corpus(8);
        let cfg = tiny_cfg(ModelKind::Bert);
        let plan = TrainPlan { epochs: 1, ..TrainPlan::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = NeuralModel::new(&cfg, vocab, 3, &plan, &mut rng).unwrap();
        let before = model.store.value("nsp.w").unwrap().clone();
        let ex: Vec<Example> = essays.iter().map(|e| model.example(&e.text, e.label).unwrap()).collect();
        let r = finetune(model, &ex, &[], &plan).unwrap();
        assert_eq!(r.model.store.value("nsp.w").unwrap(), &before);
    }

    #[test]
    fn gradual_unfreeze_holds_lower_layers_in_first_epoch() {
        let (essays, vocab) = corpus(8);
        let cfg = ModelConfig { layers: 2, ..tiny_cfg(ModelKind::Bert) };
        let plan = TrainPlan { epochs: 1, gradual_unfreeze: true, ..TrainPlan::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = NeuralModel::new(&cfg, vocab, 3, &plan, &mut rng).unwrap();
        let layer0 = model.store.value("bert.0.q.w").unwrap().clone();
        let word = model.store.value("bert.word").unwrap().clone();
        let head = model.store.value("head.w").unwrap().clone();
        let ex: Vec<Example> = essays.iter().map(|e| model.example(&e.text, e.label).unwrap()).collect();
        let r = finetune(model, &ex, &[], &plan).unwrap();
        assert_eq!(r.model.store.value("bert.0.q.w").unwrap(), &layer0);
        assert_eq!(r.model.store.value("bert.word").unwrap(), &word);
        assert_ne!(r.model.store.value("head.w").unwrap(), &head);
        assert!(r.model.store.is_trainable("bert.0.q.w"));
    }

    #[test]
    fn folds_report_on_validation() {
        let (essays, _) = corpus(30);
        let raw = synthetic_essays(&SynthSpec::new(1, 30, 2, 3)).unwrap();
        let splits = kfold_splits(&raw, 1).unwrap();
        let plan = TrainPlan { bow_epochs: 50, ..TrainPlan::default() };
        let folds = kfold(&ModelConfig::desk(ModelKind::Bow), None, &essays, &splits, 3, &plan).unwrap();
        assert_eq!(folds.len(), 5);
        for (f, s) in folds.iter().zip(&splits) {
            let ids: Vec<i64> = f.predictions.iter().map(|p| p.0).collect();
            assert_eq!(ids, s.validation);
            assert_eq!(f.report.n, s.validation.len());
        }
        assert!(train_model(&ModelConfig::desk(ModelKind::Lstm), None, &essays, &[], 3, &plan).is_err());
    }
}
