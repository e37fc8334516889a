use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("fold {fold} training complement lacks treatment arm {arm}")]
    FoldComposition { fold: usize, arm: u8 },

    #[error("logistic fit did not converge after {iterations} iterations (gradient sup-norm {gradient_norm:.3e})")]
    Convergence { iterations: usize, gradient_norm: f64 },

    #[error("perfect separation detected (coefficient norm {coef_norm:.3e})")]
    Separation { coef_norm: f64 },

    #[error("empty subgroup: {0}")]
    EmptySubgroup(String),

    #[error("variance undefined: subgroup of size {0} has fewer than 2 members")]
    VarianceUndefined(usize),

    #[error("perturbation denominator stayed below the guard after {0} redraws")]
    DegeneratePerturbation(usize),

    #[error("predictor unavailable for cate source `{0}`")]
    PredictorUnavailable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
