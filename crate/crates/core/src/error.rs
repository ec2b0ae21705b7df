use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum PsarError {
    #[error("node {0} has zero out-degree; drop it before row-normalizing")]
    ZeroOutDegree(usize),

    #[error("edge probabilities exceed 1 for n = {n} (total {total:.4})")]
    ProbabilityOverflow { n: usize, total: f64 },

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unknown trace expression `{0}`")]
    UnknownSpec(String),

    #[error("covariate cross-product X'X is singular")]
    RankDeficientX,

    #[error("likelihood maximizer hit the rho boundary at {0:.4}")]
    NoInteriorMax(f64),

    #[error("corrected Hessian is singular")]
    SingularCorrectedHessian,

    #[error("sigma^2 update {0:.3e} is not positive")]
    NonPositiveSigma2(f64),

    #[error("no convergence after {0} iterations")]
    MaxIterExceeded(usize),

    #[error("only {converged} of {total} bootstrap fits converged")]
    TooFewConverged { converged: usize, total: usize },

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PsarError>;

impl PsarError {
    /// True for errors caused by bad input or configuration rather than a
    /// numerical failure during estimation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            PsarError::ZeroOutDegree(_)
                | PsarError::ProbabilityOverflow { .. }
                | PsarError::Dimension(_)
                | PsarError::Config(_)
                | PsarError::Parse(_)
                | PsarError::Io(_)
                | PsarError::Csv(_)
                | PsarError::Json(_)
                | PsarError::UnknownSpec(_)
        )
    }
}
