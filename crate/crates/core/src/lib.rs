//! Hierarchical concurrent-memory LSTM for classifying multi-person
//! sequences.
//!
//! Each person's feature track runs through its own LSTM; a concurrent LSTM
//! then merges the per-person hidden states through per-person sub-memory
//! cells, cell gates and a shared co-memory cell. Everything is written out by
//! hand in `f64`, including backpropagation through time, so gradients can be
//! checked against finite differences.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod co_lstm;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod model;
pub mod numerics;
pub mod sp_lstm;
pub mod tensors;
pub mod train;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use checkpoint::Checkpoint;
pub use co_lstm::{CoLstmParams, CoLstmState, GateOverride};
pub use data::{Dataset, SynthConfig};
pub use error::{Error, Result};
pub use model::{ArchVariant, HlstcmConfig, HlstcmParams, Sample};
pub use numerics::{Matrix, Vector};
pub use sp_lstm::{SpLstmParams, SpLstmState};
pub use tensors::Tensors;
pub use train::{EpochMetrics, Evaluation, GradCheckOptions, GradCheckReport, TrainConfig, Trainer};

