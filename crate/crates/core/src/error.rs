//! Shared error type for solver, autodiff, and I/O failures.

use thiserror::Error;

/// Errors surfaced by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or field shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A solver state left the guarded range (|u| > 1e6).
    #[error("diverged at step {step}: max |u| = {max_abs:.3e}")]
    Diverged { step: usize, max_abs: f64 },
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, sample {sample}")]
    TrainDiverged { epoch: usize, sample: usize },
    /// A region average has a vanishing denominator (contour vanished).
    #[error("empty region: {0}")]
    EmptyRegion(String),
    /// Stability multipliers violate delta > tau or gamma > L/(eps1*eps2).
    #[error("bad stability multipliers: {0}")]
    BadMultipliers(String),
    /// Spatial size is incompatible with the network's pooling depth.
    #[error("input too small: {0}")]
    InputTooSmall(String),
    /// A scalar parameter is outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    /// A file exists but does not parse as the expected format.
    #[error("decode error in {path}: {reason}")]
    Decode { path: String, reason: String },
    /// Underlying filesystem failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
