//! Hierarchical feature-fusion CNNs with ensemble Monte Carlo dropout.
//!
//! The crate trains three small convolutional classifiers from scratch — a
//! plain CNN, a multi-headed CNN, and a two-branch fusion network that
//! concatenates feature taps from several depths — and quantifies prediction
//! uncertainty by keeping dropout active at inference and averaging the
//! softmax outputs of many stochastic passes, optionally across an ensemble
//! of independently trained models.
//!
//! Everything is deterministic given the seeds: weight initialization,
//! dropout masks, data synthesis, noise injection, and batch order all draw
//! from seeded [`rng::Rng`] streams.

pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Gradients, NodeId, Tape, Tensor};
