use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A GReaT text record failed to parse. `token` is 1-based.
    #[error("parse error in record {record}, token {token}: {reason}")]
    Parse {
        record: usize,
        token: usize,
        reason: String,
    },

    /// A CSV cell could not be read. `row` is 1-based and excludes the header.
    #[error("csv error at row {row}, column {column:?}: {reason}")]
    Csv {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("pool for group {group} is short by {shortfall} samples")]
    InsufficientPool { group: String, shortfall: usize },

    #[error("hessian is not positive definite (smallest eigenvalue {0:e})")]
    SingularHessian(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("truncated lattice tail mass {0:e} exceeds tolerance")]
    TailMass(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
