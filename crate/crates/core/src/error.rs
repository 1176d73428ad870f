use thiserror::Error;

/// Errors raised by the library. Numeric witnesses are carried as `f64`
/// regardless of the scalar type in use.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("negative time {0}")]
    NegativeTime(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("resolvent failed at t={t}, xi={xi}, component {component}: {reason}")]
    Resolvent {
        t: f64,
        xi: f64,
        component: usize,
        reason: String,
    },

    #[error("degenerate diffusion at t={t}, xi={xi}: {reason}; use instanton_minimize instead")]
    Degenerate { t: f64, xi: f64, reason: String },

    #[error("initial frame of the path differs from the initial data by {0}")]
    InitialMismatch(f64),

    #[error("optimizer did not converge: {0}")]
    Convergence(String),

    #[error("missing super-dissipativity data for the drift")]
    MissingSuperDissipativity,

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("scenario schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("flagged fraction {fraction} exceeds the 1% budget in {context}")]
    TooManyFlagged { fraction: f64, context: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
