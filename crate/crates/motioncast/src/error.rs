//! Error types shared across the crate.
//!
//! Every failure carries a stable category string so batch tooling can map
//! errors to exit codes without parsing free-form messages.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameter value (counts, rates, scales, out-of-range epochs).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Geometric inconsistency (empty masks, out-of-bounds shapes, disjoint crops).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Tensor/sequence shape mismatch. The message names both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed binary or text artifact. `offset` is the byte position at
    /// which decoding failed, when known.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Cohort manifest inconsistency (duplicate ids, too few patients).
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Caller broke an API contract (non-scalar loss, session missing from a
    /// result, model/dataset window mismatch).
    #[error("contract error: {0}")]
    Contract(String),

    /// Numeric breakdown (NaN/Inf where finite values are required).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A referenced input file does not exist.
    #[error("input not found: {0}")]
    InputNotFound(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-parsable category name, used for CLI exit codes and
    /// one-line error reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Geometry(_) => "geometry",
            Error::Shape(_) => "shape",
            Error::Format { .. } => "format",
            Error::Manifest(_) => "manifest",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::InputNotFound(_) => "input-not-found",
            Error::Io(_) => "io",
        }
    }

    /// Convenience constructor for [`Error::Format`].
    pub fn format_at(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
