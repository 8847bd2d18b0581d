use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated by its caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension { what: String, expected: usize, got: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("graph is not connected: {0}")]
    Disconnected(String),

    /// Algorithm and topology cannot be paired.
    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("no convergent parameter in interval [{lo}, {hi}]")]
    NoConvergentParameter { lo: f64, hi: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
