use thiserror::Error;

pub type Result<T> = std::result::Result<T, TheiaError>;

#[derive(Debug, Error)]
pub enum TheiaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    /// A harness construction violated its own invariant. Always a bug.
    #[error("harness invariant violated: {0}")]
    Harness(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    /// Plateau restarts ran out; `log` is the JSON restart log.
    #[error("restart cap reached after {restarts} restarts: {log}")]
    RestartCap { restarts: u64, log: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Autodiff(#[from] theia_autodiff::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
