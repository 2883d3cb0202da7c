//! Parametric neighbor-embedding dimension reduction.
//!
//! A multilayer perceptron is trained to map high-dimensional points to a
//! low-dimensional embedding under a t-SNE, LargeVis or UMAP objective, with
//! per-point and per-layer gradient clipping keeping optimisation stable. The
//! trained encoder embeds unseen points with a single forward pass.

pub mod affinity;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod network;
pub mod neighbors;
pub mod objective;
pub mod persist;
pub mod plot;
pub mod trainer;

pub use dataio::Dataset;
pub use error::{Error, Result};
pub use network::EncoderNet;
pub use trainer::{fit, transform, EmbeddingModel, LossKind, TrainConfig, TrainHistory};
