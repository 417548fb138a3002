use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapError {
    #[error("validation error: {0}")]
    Validation(String),

    /// A matrix that had to be positive definite was not.
    #[error("{context}: matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { context: String, eigenvalue: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in log-posterior term `{term}`")]
    NonFinite { term: &'static str },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error(
        "{divergent} of {total} post-warmup transitions diverged in chain {chain}; \
         reduce the step size (raise the target acceptance rate)"
    )]
    Divergence {
        chain: usize,
        divergent: usize,
        total: usize,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("candidate d = {d}: {source}")]
    Candidate {
        d: usize,
        #[source]
        source: Box<CapError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CapError>;
