use thiserror::Error;

/// Errors produced by model construction, training and the optimization loops.
#[derive(Debug, Error)]
pub enum CcboError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parameter outside its domain: {0}")]
    ParameterDomain(String),

    #[error("conditioning data is ill-conditioned: Cholesky failed after jitter escalation up to {max_jitter:e}")]
    IllConditioned { max_jitter: f64 },

    #[error("duplicate conditioning input at rows {first} and {second}")]
    DuplicateInput { first: usize, second: usize },

    #[error("conditioning data has {rows} rows, exceeding the cap of {cap}")]
    DataCap { rows: usize, cap: usize },

    #[error("hyperparameter training failed: {0}")]
    TrainingFailed(String),

    #[error("problem evaluation failed: {0}")]
    EvaluationFailed(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CcboError>;
