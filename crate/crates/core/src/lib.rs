//! Automated essay scoring at desk scale.
//!
//! The crate bundles everything needed to train and evaluate essay scorers on
//! a CPU: a small reverse-mode differentiation engine, inter-rater agreement
//! statistics, corpus handling with seeded 5-fold splits, a subword
//! tokenizer, a TF-IDF baseline, a gated LSTM, BERT- and XLNet-style encoders,
//! and fine-tuning / ensembling utilities.

pub mod bow;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{adam_step, AdamConfig, Gradients, ParamStore};
pub use tape::{Graph, Var};
pub use tensor::Tensor;
