//! Error types shared across the crate.

use thiserror::Error;

/// Shape or value problems raised by tensor and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gradient request rejected: {0}")]
    Gradient(String),
}

/// Configuration parsing and validation failures (CLI exit code 2).
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("config validation failed: {0}")]
    Validation(String),
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// Dataset generation, storage, and ingestion failures (CLI exit code 3).
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed sample record: {0}")]
    Format(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("dataset constraint violated: {0}")]
    Constraint(String),
}

/// Metric computations that are undefined for the given inputs
/// (CLI exit code 4 when surfaced from evaluation).
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("degenerate marginals: {0}")]
    DegenerateMarginals(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("prediction file error: {0}")]
    PredictionFile(String),
}

/// Training-time failures (CLI exit code 4).
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
