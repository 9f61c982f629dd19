// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module.

use std::path::PathBuf;

/// Errors raised by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged.
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss {
        /// Optimizer step at which the loss was observed.
        step: usize,
    },

    /// A caller-supplied argument is outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An index (token, layer, feature, head) is out of range.
    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        /// Kind of index.
        what: &'static str,
        /// Offending value.
        index: usize,
        /// Exclusive upper bound.
        limit: usize,
    },

    /// An operation was called without its required inputs.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// An exact-sum invariant was violated beyond tolerance.
    #[error("conservation violated: {what} deviates by {deviation:e} (tolerance {tolerance:e})")]
    Conservation {
        /// Which identity failed.
        what: String,
        /// Observed absolute deviation.
        deviation: f64,
        /// Allowed deviation.
        tolerance: f64,
    },

    /// A pipeline stage ran before the stage that produces its inputs.
    #[error("missing upstream artifact {path}: run `steerlab {command}` first")]
    MissingArtifact {
        /// Artifact that was not found.
        path: PathBuf,
        /// Command that produces it.
        command: &'static str,
    },

    /// An upstream artifact was produced under a different configuration.
    #[error("stale artifact from `{command}`: produced with stage hash {found}, current config gives {expected}; rerun `steerlab {command}`")]
    StaleArtifact {
        /// Command that produced the artifact.
        command: &'static str,
        /// Hash recorded in the upstream manifest.
        found: String,
        /// Hash implied by the current configuration.
        expected: String,
    },

    /// Malformed file or configuration.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error at {path}: {source}")]
    Io {
        /// Path being accessed.
        path: PathBuf,
        /// Cause.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
