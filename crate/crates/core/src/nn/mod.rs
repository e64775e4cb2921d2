//! Minimal neural-network core: tensors, sequential layers, forward and
//! reverse passes, cross-entropy, presets and a finite-difference checker.

mod config;
mod gradcheck;
pub(crate) mod kernels;
mod loss;
mod model;
mod scalar;
mod tensor;

pub use config::{preset_names, ActShape, LayerPlan, LayerSpec, ModelConfig, Padding, N_CLASSES};
pub use gradcheck::{grad_check, grad_check_against, input_grad_check, GRAD_CHECK_FLOOR};
pub use loss::loss_ce;
pub use model::{
    build_model, BatchStats, BnState, ForwardPass, Gradients, Mode, Model, StepOutput,
};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch{}: {msg}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    ShapeMismatch { layer: Option<usize>, msg: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}
