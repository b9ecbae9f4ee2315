//! Fairness-aware binary classification with an embedded distraction module.
//!
//! A fully connected classifier carries a small block of layers (the
//! distraction set) whose weights are trained by their own optimizer against
//! a demographic-parity objective, while every other weight (the classifier
//! set) is trained on binary cross-entropy. Sweeping the fairness weight `η`
//! traces an accuracy/fairness trade-off curve.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod trainer;

pub use autodiff::{Graph, Matrix, NodeId};
pub use error::{Error, Result};
pub use model::{build_model, ModelConfig, PartitionedModel};
pub use trainer::{train, TrainConfig};
