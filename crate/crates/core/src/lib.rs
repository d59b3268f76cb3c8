//! Noise-compensated ANN-to-SNN conversion at desk scale.
//!
//! The pipeline: train a small source ANN whose activations are quantized
//! staircases with additive Gaussian noise, convert it losslessly to an
//! integrate-and-fire spiking network, simulate over `T` time steps, and
//! measure/calibrate the residual conversion error layer by layer.

pub mod activation;
pub mod analysis;
pub mod ann;
pub mod calibrate;
pub mod convert;
pub mod error;
pub mod io;
pub mod rng;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RandomSource;
pub use tensor::Tensor;
