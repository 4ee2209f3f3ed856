//! Training plans, per-layer learning rates, gradual unfreezing, sliding
//! windows and window-level rounding.

use crate::error::{Error, Result};

/// Learning rates quoted for fine-tuning pretrained encoders. Models
/// trained from scratch at desk scale default to a larger rate.
pub const PRETRAINED_LRS: [f64; 2] = [1e-5, 5e-6];
pub const DISCRIMINATIVE_XI: f64 = 0.95;
pub const VARIANT_DROPOUT: f64 = 0.2;
pub const VARIANT_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Fixed,
    /// Each layer's rate is `xi` times the rate of the layer above.
    Discriminative {
        xi: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub gradual_unfreeze: bool,
    /// Replaces the encoder's dropout probability.
    pub dropout: Option<f64>,
    /// Keeps only the first `n` encoder layers.
    pub layer_limit: Option<usize>,
    pub remove_stopwords: bool,
    pub batch_size: usize,
    pub seed: u64,
    /// Linear warm-up length in optimizer steps; `0` disables it.
    pub warmup_steps: usize,
    /// Average window probabilities instead of window labels.
    pub average_probabilities: bool,
    /// Ends training after the first epoch with perfect training accuracy.
    pub stop_when_train_perfect: bool,
    pub bow_epochs: usize,
    pub bow_lr: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 30,
            base_lr: 1e-3,
            lr_schedule: LrSchedule::Fixed,
            gradual_unfreeze: false,
            dropout: None,
            layer_limit: None,
            remove_stopwords: false,
            batch_size: 8,
            seed: 0,
            warmup_steps: 0,
            average_probabilities: false,
            stop_when_train_perfect: false,
            bow_epochs: 300,
            bow_lr: 0.05,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.bow_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let LrSchedule::Discriminative { xi } = self.lr_schedule {
            if !(xi > 0.0 && xi <= 1.0) {
                return Err(Error::Config(format!("xi {xi} not in (0, 1]")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if let Some(l) = self.layer_limit {
            if l == 0 || l > n_layers {
                return Err(Error::Config(format!("layer_limit {l} not in 1..={n_layers}")));
            }
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} not in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn active_layers(&self, n_layers: usize) -> usize {
        self.layer_limit.map_or(n_layers, |l| l.min(n_layers))
    }
}

/// Bottom-to-top rates: the top entry is `base`, each lower one `xi` times
/// the one above.
pub fn discriminative_lrs(base: f64, xi: f64, layer_count: usize) -> Result<Vec<f64>> {
    if !(base > 0.0) || !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::Config(format!("base {base} / xi {xi} out of range")));
    }
    let mut lrs = vec![base; layer_count];
    for i in (0..layer_count.saturating_sub(1)).rev() {
        lrs[i] = lrs[i + 1] * xi;
    }
    Ok(lrs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Layer(usize),
    /// Pooler and classification layer.
    Head,
    /// Pretraining-only heads, unused while fine-tuning.
    Pretraining,
}

pub fn param_group(name: &str) -> ParamGroup {
    let mut parts = name.split('.');
    let root = parts.next().unwrap_or("");
    let second = parts.next().unwrap_or("");
    match root {
        "mlm" | "nsp" => ParamGroup::Pretraining,
        "xlnet" if second == "lm_bias" => ParamGroup::Pretraining,
        "bert" | "xlnet" | "lstm" => match second.parse() {
            Ok(l) => ParamGroup::Layer(l),
            Err(_) => ParamGroup::Embedding,
        },
        _ => ParamGroup::Head,
    }
}

/// Rate for a group given bottom-to-top rates over `layers + 1` levels,
/// where the head is the top level and embeddings share the bottom rate.
pub fn group_lr(group: ParamGroup, lrs: &[f64]) -> f64 {
    match group {
        ParamGroup::Embedding => lrs[0],
        ParamGroup::Layer(l) => lrs[l.min(lrs.len() - 1)],
        ParamGroup::Head | ParamGroup::Pretraining => lrs[lrs.len() - 1],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unfrozen {
    /// Number of encoder layers trainable, counted from the top.
    pub top_layers: usize,
    pub embeddings: bool,
}

impl Unfrozen {
    pub fn allows(&self, group: ParamGroup, n_layers: usize) -> bool {
        match group {
            ParamGroup::Head => true,
            ParamGroup::Layer(l) => l < n_layers && l + self.top_layers >= n_layers,
            ParamGroup::Embedding => self.embeddings,
            ParamGroup::Pretraining => false,
        }
    }
}

/// Epoch 1 trains the head alone; epoch `e` adds the top `e − 1` layers;
/// embeddings join at epoch `n_layers + 2`.
pub fn gradual_unfreeze(epoch: usize, n_layers: usize) -> Result<Unfrozen> {
    if epoch == 0 {
        return Err(Error::Param("epochs count from 1".into()));
    }
    Ok(Unfrozen { top_layers: (epoch - 1).min(n_layers), embeddings: epoch >= n_layers + 2 })
}

/// Consecutive `window`-sized spans; the last one is pulled back to end
/// at `count` so every span is full length.
pub fn sliding_windows(count: usize, window: usize) -> Result<Vec<(usize, usize)>> {
    if count == 0 || window == 0 {
        return Err(Error::Param(format!("count {count} / window {window} must be positive")));
    }
    if count <= window {
        return Ok(vec![(0, count)]);
    }
    let mut spans: Vec<(usize, usize)> =
        (0..count.div_ceil(window)).map(|i| (i * window, ((i + 1) * window).min(count))).collect();
    let last = spans.last_mut().expect("at least two spans");
    *last = (count - window, count);
    Ok(spans)
}

/// Arithmetic mean rounded half away from zero and clamped to `0..k`.
pub fn mean_round(labels: &[usize], k: usize) -> Result<usize> {
    if labels.is_empty() || k == 0 {
        return Err(Error::Empty("no labels to average".into()));
    }
    let mean = labels.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok((mean.round() as usize).min(k - 1))
}

pub fn warmup_factor(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}
