//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised by the surface toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A price or parameter lies outside the region where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative method failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Vector or matrix dimensions disagree.
    #[error("shape mismatch: {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A NaN or infinity was produced or encountered.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The regression design matrix does not have full column rank.
    #[error("rank-deficient design matrix; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    /// Feature sets of two objects disagree.
    #[error("feature set mismatch: expected {expected:?}, got {actual:?}")]
    FeatureMismatch {
        expected: Vec<String>,
        actual: Vec<String>,
    },

    /// A backward pass was requested with a tape recorded before a parameter update.
    #[error("stale tape: recorded at parameter version {tape}, network is at {network}")]
    StaleTape { tape: u64, network: u64 },

    /// A pricing or inversion failure at a specific grid node.
    #[error("failure at node (m index {m_index}, tau index {tau_index}): {source}")]
    Node {
        m_index: usize,
        tau_index: usize,
        #[source]
        source: Box<Error>,
    },

    /// A stored file is malformed or inconsistent.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
