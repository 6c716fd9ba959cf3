//! Pooling operators with forward and reverse-mode backward passes.
//!
//! Max pooling is treated as two steps: a stride-1 windowed max that keeps
//! the spatial size, followed by a downsampling gather. S3Pool keeps the
//! first step and replaces the deterministic top-left gather with a random
//! row/column pattern drawn per grid strip. Baselines (deterministic max,
//! average, magnitude-proportional stochastic pooling) share the same
//! window conventions: windows anchored at `(i-1)s+1` and truncated at the
//! map border, never padded.

mod max;
mod s3pool;
mod zeiler;

pub use max::{
    avg_pool, avg_pool_backward, max_pool_backward, max_pool_standard, max_pool_stride1, uniform_downsample,
    MaxTape,
};
pub use s3pool::{
    exact_expectation_infer, s3pool_apply_frozen, s3pool_backward, s3pool_forward, s3pool_infer,
    stochastic_downsample, S3PoolTape,
};
pub use zeiler::{zeiler_backward, zeiler_stochastic_pool, ZeilerTape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// How S3Pool replaces the random gather at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferRule {
    /// Average pooling with window and stride `s` over the stride-1 max map.
    #[default]
    Average,
    /// Deterministic top-left gather, as in plain max pooling.
    TopLeft,
    /// Closed-form expectation of the random gather.
    Expectation,
}

/// Output spatial size for stride `s`, which must divide both axes.
pub(crate) fn strided_dims(dims: Dims, s: usize) -> Result<Dims> {
    if s == 0 || dims.h() % s != 0 || dims.w() % s != 0 {
        return Err(Error::geometry(format!(
            "stride {s} does not divide the {}x{} feature map",
            dims.h(),
            dims.w()
        )));
    }
    Ok(Dims::derived(dims.n(), dims.c(), dims.h() / s, dims.w() / s))
}

pub(crate) fn check_window(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::geometry("pooling window must be >= 1"));
    }
    Ok(())
}

/// Zero-based half-open bounds of the window anchored at zero-based `start`,
/// truncated at `extent`.
#[inline]
pub(crate) fn window(start: usize, k: usize, extent: usize) -> std::ops::Range<usize> {
    start..(start + k).min(extent)
}
