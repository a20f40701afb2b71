//! Crate-wide error type.
//!
//! Variants are grouped into four categories that the CLI maps onto process
//! exit codes: configuration (2), data (3), fitting (4) and I/O (5).

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid run configuration: bad flag combinations, unknown method or
    /// attribute names, out-of-range targets.
    #[error("config: {0}")]
    Config(String),

    /// A cross-validation protocol violation, e.g. evaluating a model on a
    /// fold it was fitted on.
    #[error("protocol: {0}")]
    Protocol(String),

    /// Malformed input file contents, with the location of the offending row.
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    /// Structurally invalid data: dimension mismatches, non-contiguous folds,
    /// duplicate ids, zero-norm embeddings and similar.
    #[error("invalid data: {0}")]
    Structural(String),

    /// A metric was called on input that cannot support it (empty slice,
    /// single-class labels).
    #[error("metric: {0}")]
    Metric(String),

    /// Model fitting failed: empty or single-class calibration set, degenerate
    /// clustering input.
    #[error("fit: {0}")]
    Fit(String),

    /// An iterative fit ran out of iterations before reaching tolerance.
    #[error("fit did not converge: {what} (final gradient norm {grad_norm:.3e})")]
    Convergence { what: String, grad_norm: f64 },

    /// Underlying filesystem failure.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this error's category: 2 = config, 3 = data,
    /// 4 = fit failure, 5 = I/O. (0 is success; 1 is reserved for panics.)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Protocol(_) => 2,
            Error::Parse { .. } | Error::Structural(_) | Error::Metric(_) => 3,
            Error::Fit(_) | Error::Convergence { .. } => 4,
            Error::Io { .. } => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
