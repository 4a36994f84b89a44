use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("optimal control did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("evaluator returned a non-finite value at {point}")]
    EvaluatorFailure { point: String },

    #[error("non-finite state for particle {particle} at step {step}")]
    NonFinite { particle: usize, step: usize },

    #[error("tangent flow singular for particle {particle} at step {step} (condition {condition:e})")]
    SingularFlow {
        particle: usize,
        step: usize,
        condition: f64,
    },

    #[error("bracket depth {depth} unsupported: {reason}")]
    DepthUnsupported { depth: usize, reason: String },

    #[error("exact W2 unsupported for {n} particles in dimension {d}")]
    ModeUnsupported { n: usize, d: usize },

    #[error("regression singular at step {step}")]
    RegressionSingular { step: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("Picard iteration did not converge in {max_iter} iterations (last residual {last:e})")]
    NoConvergence {
        max_iter: usize,
        last: f64,
        residual_history: Vec<f64>,
    },

    #[error("missing evaluator: {0}")]
    MissingEvaluator(String),

    #[error("need at least {needed} nodes, found {found}")]
    InsufficientNodes { needed: usize, found: usize },

    #[error("invalid bandwidth {0}")]
    BandwidthInvalid(f64),

    #[error("unknown {kind} '{name}' (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub(crate) fn check_finite(value: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::EvaluatorFailure { point: what() })
    }
}
