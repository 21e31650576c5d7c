use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix: pivot {pivot:e} below threshold {threshold:e}")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("eigenvalue iteration did not converge after {iterations} iterations")]
    EigenNoConvergence { iterations: usize },

    #[error("eigenvalue 1 of P is not simple (null space dimension {nullity})")]
    EigenvalueOneNotSimple { nullity: usize },

    #[error("invalid tableau: {0}")]
    InvalidTableau(String),

    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("Newton iteration failed in stage {stage} after {iterations} iterations (residual {residual:e})")]
    NewtonNoConvergence {
        stage: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step size {dt} does not divide the interval [{t0}, {t_end}]")]
    StepSizeMismatch { dt: f64, t0: f64, t_end: f64 },

    #[error("need at least {needed} data points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("reference computation failed: {0}")]
    Reference(Box<Error>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
