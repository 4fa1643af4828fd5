//! Zero-shot spatial gene-expression prediction.
//!
//! Window features are refined over a slide graph with two directed k-NN
//! edge types (spatial position and feature similarity). Each gene's
//! description token matrix is embedded by a small transformer into a vector
//! in the same space, and expression is predicted as the dot product of the
//! two. Because genes enter only through their descriptions, a trained model
//! predicts expression for genes it never saw during training.

pub mod commands;
pub mod data;
pub mod embedder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nd;
pub mod predictor;
pub mod sage;
pub mod train;

pub use error::{Error, Result};
