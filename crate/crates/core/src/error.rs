//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid header {path}: field {field}: {reason}")]
    Header {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    #[error("payload size mismatch in {path}: header implies {expected} bytes, file has {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite {what} at linear index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: String, actual: String },

    #[error("degenerate intensity range: min equals max")]
    DegenerateRange,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all-zero weight table: intensities do not overlap the binning range")]
    DegenerateWeights,

    #[error("phantom generation failed: jacobian bound not met after {attempts} rescalings")]
    PhantomGeneration { attempts: usize },

    #[error("non-finite loss at pyramid level {level}, iteration {iteration}")]
    NonFiniteLoss { level: usize, iteration: usize },
}
