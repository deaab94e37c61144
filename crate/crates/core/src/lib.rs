//! Variable-rate learned image compression: a small autodiff engine, the
//! compression networks with interpolated channel-attention rate gates, a
//! Laplacian entropy model with a range coder, training and evaluation.

pub mod checkpoint;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod interpca;
pub mod layers;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
