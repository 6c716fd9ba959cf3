//! S3Pool: max pooling split into stride-1 pooling and a stochastic
//! row/column downsampling step, with the usual pooling baselines, a small
//! differentiable CNN stack, dataset readers and an experiment harness.

pub mod error;
pub mod harness;
pub mod data;
pub mod nn;
pub mod pooling;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Axis, Dims, Reduction, Tensor4};
