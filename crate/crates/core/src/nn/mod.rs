//! Minimal dense-network numeric core.
//!
//! Everything here is a pure function over value types: a [`SequentialModel`]
//! is a list of [`DenseLayer`]s, [`forward`] returns the output together with a
//! [`ForwardCache`] and [`backward`] turns that cache into per-layer parameter
//! gradients plus the gradient with respect to the model input. The input
//! gradient is what crosses the device/server seam when a model is split.

mod matrix;
mod model;

pub use matrix::Matrix;
pub use model::{
    backward, backward_from_output_grad, backward_with_loss, forward, loss_value, sgd_step,
    Activation, BackwardResult, DenseLayer, ForwardCache, Gradients, LayerGrad, LayerSpec,
    LossKind, SequentialModel, MODEL_FORMAT,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer {layer}: expected input width {expected}, found {found}")]
    LayerMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("forward cache does not belong to this model: {0}")]
    StaleCache(String),
    #[error("model encoding: {0}")]
    Encoding(String),
}
