//! Error type shared by the library modules.

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("wrong label variant: expected {expected}")]
    WrongVariant { expected: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("bad magic number in {file}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { file: String, expected: u32, found: u32 },

    #[error("truncated file {file}: {detail}")]
    Truncated { file: String, detail: String },

    #[error("requested {requested} records but only {available} are available")]
    CountExceeds { requested: usize, available: usize },

    #[error("sample {0} is the zero vector and cannot be normalized")]
    ZeroVector(usize),

    #[error("empty sample subset")]
    EmptySubset,

    #[error("partition undefined: output weight of neuron {neuron} is zero for sample {sample}")]
    PartitionUndefined { sample: usize, neuron: usize },

    #[error("dense Hessian of {params} parameters exceeds the {limit} limit")]
    HessianTooLarge { params: usize, limit: usize },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("zero vector passed to the arc-cosine kernel")]
    ZeroKernelArgument,

    #[error("incompatible loss: {0}")]
    IncompatibleLoss(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
