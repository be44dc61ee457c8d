//! Minimal CPU tensor engine for training toy diffusion models.
//!
//! Tensors are dense NCHW `f32` buffers. Convolutions lower to `im2col` plus a
//! single-threaded sgemm, so every forward and backward pass is bit
//! reproducible on a given machine.

mod graph;
pub mod kernels;
mod optim;
mod store;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use store::{Init, ParamStore};
pub use tensor::{numel, Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
