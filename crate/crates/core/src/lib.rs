//! Noise-aware training for analog compute-in-memory crossbars with a
//! straight-through estimator: a non-differentiable crossbar simulator runs
//! in the forward pass while gradients flow through the clean computation.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod noise;
pub mod quant;
pub mod ste;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use noise::{NoiseConfig, NoiseCounter, Source};
pub use ste::{build_model, noisy_linear, GradMode, LinearLayer, Mlp};
pub use tensor::{Precision, QuantizerGrad, Tape, Tensor};
