//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! Values are `f64` and laid out batch-major, channels-first. Operations are
//! recorded eagerly on a [`Graph`]; parameters live in a [`ParamStore`] and are
//! updated by an [`Optimizer`].

mod conv;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod loss;
pub mod optim;
mod params;
mod tensor;

pub use conv::{ConvGeometry, ConvShape};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Activation, BatchStats, Gradients, Graph, Var};
pub use loss::{CombinedLoss, FeatureExtractor, IdentityFeatures};
pub use optim::{clip_weights, Adam, AdamConfig, Optimizer, OptimizerConfig, RmsProp, RmsPropConfig};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

/// Raw kernels, exposed for oracle tests and benchmarks.
pub mod kernels {
    pub use crate::conv::{
        conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvGrads,
    };
}
