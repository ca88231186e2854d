//! Trainable layers with explicit forward/backward passes.

mod batchnorm;
mod layers;
mod xconv;

pub use batchnorm::{BatchNormState, BnCache, BnGrads, DEFAULT_MOMENTUM, DEFAULT_STAB_EPS};
pub use layers::{argmax_rows, relu, relu_backward, softmax, softmax_cross_entropy, Conv2d, Linear, LinearGrads};
pub use xconv::{recover_mean, recover_mean_closed_form, RecoveredMean, XconvBnBank, XconvRecord};

pub(crate) use layers::sgd;
