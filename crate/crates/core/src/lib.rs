//! Composite classifier-free guidance for multi-conditioned diffusion models,
//! applied to super-resolution of synthetic paired wind fields.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod metrics;
pub mod seed;
pub mod selection;
pub mod tensor;
pub mod testbed;

pub use error::{Error, Result};
pub use tensor::Tensor;
