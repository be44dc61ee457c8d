//! Toy-scale latent diffusion inpainting with mask-guided control residuals.

pub mod baselines;
pub mod brushnet;
pub mod controlnet;
pub mod diffusion;
pub mod finetune;
mod error;
pub mod mask_ops;

pub use error::{Error, Result};
