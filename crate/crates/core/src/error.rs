use thiserror::Error;

/// Errors raised by the toolkit.
///
/// The CLI maps each variant onto a process exit code, so the split between
/// data, backend and invariant failures is part of the public contract.
#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed or inconsistent caller input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two distributions do not share a label set.
    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    /// A regression design that cannot identify its parameters.
    #[error("degenerate design: {0}")]
    Degenerate(String),

    /// A self-check detected a violated mathematical invariant.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failures reported by a scoring backend.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no recorded score for item {item_id:?} under permutation {permutation:?}")]
    MissingRecord {
        item_id: String,
        permutation: Vec<usize>,
    },

    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("malformed response body: {0}")]
    Malformed(String),

    #[error("non-finite log-probability for label {label:?}")]
    NonFinite { label: String },

    #[error("backend cannot score request: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
