//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by model construction, fitting, and I/O.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Dimensions of two objects that must agree do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A mode index outside `0..order` was supplied.
    #[error("invalid mode {mode} for an order-{order} array")]
    InvalidMode { mode: usize, order: usize },

    /// A covariance factor was not symmetric positive definite.
    #[error("covariance factor for dimension {dimension} is not positive definite{}", detail_suffix(.detail))]
    NotPositiveDefinite {
        /// Zero-based dimension of the offending factor.
        dimension: usize,
        detail: String,
    },

    /// The observed-coordinate covariance of one observation could not be
    /// factorized, so its conditional distribution is undefined.
    #[error("singular observed-cell covariance for observation {observation}")]
    SingularConditioning { observation: usize },

    /// A sample-covariance update had fewer effective columns than rows.
    #[error(
        "rank-deficient update for dimension {mode}: {columns} effective columns for a {rows}x{rows} factor"
    )]
    RankDeficient {
        mode: usize,
        rows: usize,
        columns: usize,
    },

    /// A dense materialization was requested above the configured cap.
    #[error("dense materialization of {requested} entries exceeds the cap of {cap}")]
    SizeCapExceeded { requested: usize, cap: usize },

    /// Invalid argument or state outside the other categories.
    #[error("{0}")]
    Domain(String),

    /// A text input could not be parsed. `line` is 1-based and counts the
    /// header, matching what an editor shows.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn detail_suffix(detail: &str) -> String {
    if detail.is_empty() {
        String::new()
    } else {
        format!(" ({detail})")
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CoreError::ShapeMismatch(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        CoreError::Domain(msg.into())
    }
}
