//! Unified error type for the pipeline.
//!
//! Every module reports failures through [`CoreError`]; the CLI maps the
//! variants onto process exit codes. Variants are grouped by *what went
//! wrong*, not by module, so callers can match on failure class:
//!
//! - [`CoreError::Io`] / [`CoreError::Parse`] — file system and record
//!   decoding problems (manifests, WAV containers, artifact files),
//! - [`CoreError::Contract`] / [`CoreError::Range`] /
//!   [`CoreError::Capacity`] — violated preconditions on otherwise
//!   well-formed inputs,
//! - [`CoreError::Format`] — a structurally corrupt artifact file,
//! - [`CoreError::Divergence`] — training produced a non-finite loss,
//! - [`CoreError::MissingArtifact`] — a required model file is absent,
//! - [`CoreError::Stage`] — a pipeline failure wrapped with the name of
//!   the stage that raised it.

use std::path::PathBuf;
use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type CoreResult<T> = Result<T, CoreError>;

/// All failure modes of the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Underlying file-system failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A record in a text artifact could not be decoded. `line` is
    /// 1-based; 0 means the error is not tied to a specific line.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        /// File the bad record came from.
        path: PathBuf,
        /// 1-based line number of the offending record.
        line: usize,
        /// What was wrong with it.
        message: String,
    },

    /// A precondition on an argument was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index or duration fell outside the valid interval.
    #[error("range error: {0}")]
    Range(String),

    /// An item cannot fit within a configured budget.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A binary or text artifact failed structural validation.
    #[error("format error: {0}")]
    Format(String),

    /// A training step produced NaN/Inf; the run must abort.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A referenced model artifact does not exist on disk.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// A pipeline stage failed; carries the stage name for diagnostics.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        /// Which cascade stage raised the error.
        stage: &'static str,
        /// The underlying failure.
        #[source]
        source: Box<CoreError>,
    },
}

impl CoreError {
    /// Shorthand for a [`CoreError::Contract`] with a formatted message.
    pub fn contract(message: impl Into<String>) -> Self {
        CoreError::Contract(message.into())
    }

    /// Shorthand for a [`CoreError::Range`].
    pub fn range(message: impl Into<String>) -> Self {
        CoreError::Range(message.into())
    }

    /// Shorthand for a [`CoreError::Format`].
    pub fn format(message: impl Into<String>) -> Self {
        CoreError::Format(message.into())
    }

    /// Wraps `self` with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        CoreError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

/// Converts a `candle` tensor-library error into a [`CoreError`].
///
/// Tensor failures are internal logic errors (shape mismatches and the
/// like), so they surface as contract violations.
impl From<candle_core::Error> for CoreError {
    fn from(err: candle_core::Error) -> Self {
        CoreError::Contract(format!("tensor operation failed: {err}"))
    }
}
