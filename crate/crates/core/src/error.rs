use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("state error: {0}")]
    State(String),
    #[error("infeasible batch plan: {0}")]
    InfeasiblePlan(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("full-batch gradient cache is {age} steps old (limit {limit})")]
    StaleCache { age: u64, limit: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn dim<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
