use thiserror::Error;

/// Errors raised by the identification, realization and filtering stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "ill-posed least-squares problem: numerical rank {rank} < {unknowns} unknowns \
         (condition estimate {condition:.3e})"
    )]
    IllPosed {
        rank: usize,
        unknowns: usize,
        condition: f64,
    },

    #[error(
        "conjugate gradient did not converge in {iterations} iterations \
         (residual norm {residual:.3e})"
    )]
    Convergence { iterations: usize, residual: f64 },

    #[error("degenerate process: {0}")]
    DegenerateProcess(String),

    #[error("inconsistent statistics: {0}")]
    InconsistentStatistics(String),

    #[error("realization failure: {0}")]
    Realization(String),

    #[error("cholesky factorization failed: {0}")]
    Cholesky(String),

    #[error("unstable dynamics: {0}")]
    Unstable(String),

    #[error("filter divergence at step {step}: {reason}")]
    FilterDivergence { step: usize, reason: String },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step {step} ({name}) failed: {source}")]
    Stage {
        step: u8,
        name: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the caller's configuration or files rather
    /// than by a numerical stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn stage(step: u8, name: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            step,
            name,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
