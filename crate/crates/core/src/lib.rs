//! Multi-step post-training quantization calibration for DDIM samplers.

pub mod analysis;
pub mod calibration;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod quantizer;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
