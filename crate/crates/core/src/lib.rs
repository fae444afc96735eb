//! Multi-component additive attention ("NDT") text classifiers.
//!
//! The crate bundles everything needed to train and evaluate sentiment
//! classifiers whose attention combines several softmax maps with learned
//! coefficients, alongside subtractive two-map (DT) and vanilla baselines:
//!
//! - [`numerics`]: tensors and a tape-based reverse-mode engine
//! - [`attention`]: the three attention mechanisms and coefficient machinery
//! - [`model`]: pre-norm encoder classifier, checkpoints
//! - [`training`]: two-group AdamW, initialization, train loop
//! - [`data`]: tokenizer, vocabulary, CSV ingestion, synthetic corpora
//! - [`metrics`]: classification metrics, ROC/AUC, silhouette, timing
//! - [`cli`]: command implementations behind the `ndt` binary

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
