use thiserror::Error;

use crate::tensor::Dims;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {0:?}: every axis must be >= 1 and the element count must fit in memory")]
    InvalidDims([usize; 4]),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Dims, found: Dims },

    #[error("buffer length {len} does not match dimensions {dims}")]
    BufferLength { len: usize, dims: Dims },

    #[error("index {index} out of range 1..={bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("index list must not be empty")]
    EmptyIndexList,

    #[error("reduction needs at least one axis")]
    EmptyReduction,

    #[error("invalid pooling geometry: {0}")]
    Geometry(String),

    #[error("binomial coefficient C({n}, {k}) outside the supported range 0 <= k <= n <= 64")]
    BinomialRange { n: u64, k: u64 },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("negative activation {0} passed to magnitude-proportional pooling")]
    NegativeActivation(f64),

    #[error("backward pass requires a train-mode tape")]
    MissingTape,

    #[error("non-finite gradient encountered in parameter {0}")]
    NonFiniteGradient(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
