//! Training engine for convolutional networks whose chosen layers are
//! regularized toward high activation entropy and decorrelated filters.
//!
//! The crate bundles a small reverse-mode autodiff engine, the layers of a
//! conv-conv-pool ×2 + two dense baseline network, receptive-field entropy
//! metrics, the entropy and filter-decorrelation penalties, data loaders,
//! the training loop and file exporters for the per-epoch diagnostics.

pub mod architectures;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod export;
mod kernels;
pub mod layers;
pub mod regularizers;
pub mod sparsity;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
