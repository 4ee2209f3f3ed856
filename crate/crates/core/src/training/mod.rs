//! Fine-tuning, cross-validation, ensembling and the variant grid.

pub mod ensemble;
pub mod finetune;
pub mod grid;
pub mod model;
pub mod pretrain;
pub mod schedule;

pub use ensemble::{combine_columns, ensemble_combine, Ensemble, EnsembleMode};
pub use finetune::{
    finetune, kfold, predict_essays, run_fold, selection_qwk, train_model, EpochStats, FoldResult, Trained,
};
pub use grid::{apply_variant, delta_percent, experiment_grid, GridTable, GRID_VARIANTS};
pub use model::{Example, Model, ModelConfig, ModelKind, NeuralModel};
pub use schedule::{discriminative_lrs, gradual_unfreeze, mean_round, sliding_windows, LrSchedule, TrainPlan};
