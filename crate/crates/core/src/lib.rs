//! A continual fine-tuning laboratory.
//!
//! The crate bundles a small convolutional framework with exact gradients,
//! cross-convolution batch normalization (post-convolution running means
//! recovered from stored pre-convolution means), a hierarchical fine-tuning
//! trainer for the multi-head setting, forgetting metrics and shift
//! diagnostics, a synthetic task generator, and numerical checks of the
//! overparametrized linear-model theory that motivates linear probing first.

pub mod continual;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
