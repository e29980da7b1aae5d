//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. The CLI maps
//! variants onto process exit codes (see [`Error::exit_code`]); library users
//! can match on the variants directly.

use std::path::PathBuf;

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape disagreement between tensors in a single operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        /// Operation that rejected the operands.
        op: &'static str,
        /// Shape of the left / first operand.
        lhs: Vec<usize>,
        /// Shape of the right / second operand.
        rhs: Vec<usize>,
    },

    /// Invalid configuration (bad field value, inconsistent dimensions,
    /// missing required section, unknown key, missing input file, …).
    #[error("configuration error: {0}")]
    Config(String),

    /// Structurally valid input that is degenerate for the requested
    /// computation (fully-masked softmax row, empty title, no positive label,
    /// zero-variance embeddings, …).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Dataset content problem (unknown id, out-of-range index, missing
    /// lookup entry, …).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file content; carries the offending path and line where
    /// known.
    #[error("format error in {path}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format {
        /// File that failed to parse.
        path: PathBuf,
        /// 1-based line number when known.
        line: Option<usize>,
        /// Description of the problem.
        msg: String,
    },

    /// API misuse (calling backward on a non-scalar, stepping the optimizer
    /// without gradients, mismatched impression ids, …).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A stored artifact (checkpoint, embedding dump) disagrees with the
    /// configuration or with another artifact it must match.
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    /// Artifacts that must be aligned row-for-row (embedding dumps,
    /// recommendation lists) do not align.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::Format`].
    pub fn format(path: impl Into<PathBuf>, line: impl Into<Option<usize>>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), line: line.into(), msg: msg.into() }
    }

    /// Process exit code used by the `newslab` binary.
    ///
    /// * 2 — configuration / input problems
    /// * 3 — training divergence
    /// * 4 — artifact mismatch
    /// * 5 — alignment error
    /// * 1 — anything else (I/O and the like)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::ArtifactMismatch(_) => 4,
            Error::Alignment(_) => 5,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
