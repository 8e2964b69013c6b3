use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("model is not Schur stable (spectral radius {rho})")]
    Unstable { rho: f64 },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("ill-conditioned data: smallest eigenvalue of Q is {lambda_min}")]
    IllConditioned { lambda_min: f64 },

    #[error("bound not applicable: {0}")]
    BoundInapplicable(String),

    #[error("optimizer diagnostic: {0}")]
    Optimizer(String),

    #[error("nominal action is not safe: {0}")]
    NominalUnsafe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NominalUnsafe(_) => 3,
            Error::Optimizer(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
