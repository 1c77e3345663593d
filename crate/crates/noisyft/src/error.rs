use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss ({value}) at step {step}{}", match .last_checkpoint {
        Some(p) => format!("; last good checkpoint: {p}"),
        None => String::new(),
    })]
    NonFiniteLoss {
        step: u64,
        value: f64,
        last_checkpoint: Option<String>,
    },
    #[error("tokenizer error: {0}")]
    Tokenizer(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("judge error: {0}")]
    Judge(String),
    #[error("eigensolver did not converge after {iters} iterations (residual {residual:.3e})")]
    EigenNoConvergence { iters: usize, residual: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
