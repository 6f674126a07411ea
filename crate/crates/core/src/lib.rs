//! MEMTO: a memory-guided Transformer autoencoder for unsupervised
//! multivariate time-series anomaly detection.
//!
//! The crate covers data ingestion and windowing, the encoder with its gated
//! memory module and weak decoder, two-phase training with k-means memory
//! initialization, and the bi-dimensional anomaly criterion with
//! point-adjusted evaluation.

// `!(x > 0.0)` style checks deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod error;
pub mod graph;
pub mod model;
pub mod presets;
pub mod train;

pub use checkpoint::{Checkpoint, Phase};
pub use error::{Error, Result};
pub use model::{Memto, ModelConfig};
pub use train::TrainConfig;
