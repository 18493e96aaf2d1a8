//! Dense-tensor CNN engine.
//!
//! Activations are NHWC tensors laid out as (batch, frames, bins, channels).
//! The engine is generic over [`Real`] so the same code trains in `f32` and
//! runs finite-difference checks in `f64`.

mod gradcheck;
mod layers;
mod network;
mod params;
mod spec;
mod tensor;

pub use gradcheck::{analytic_gradients, check_against, check_case, grad_check, layer_cases, CheckLoss, GradCheckOptions, GradCheckReport, TensorCheck};
pub use network::{ForwardPass, Gradients, Mode, Network};
pub use params::{ParamGrads, ParamSet, ParamTensor, TensorRole};
pub use spec::{DeskNetConfig, LayerSpec, NetSpec, Shape};
pub use tensor::{Real, Tensor4};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("network spec error between layer {prev} and layer {next}: {reason}")]
    Shape {
        prev: String,
        next: String,
        reason: String,
    },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("input batch {found:?} does not match the network input {expected}")]
    InputMismatch { expected: String, found: [usize; 4] },
    #[error("non-finite activation produced by layer {layer}")]
    NonFinite { layer: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
