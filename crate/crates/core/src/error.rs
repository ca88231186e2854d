use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("stride error: {0}")]
    Stride(String),
    #[error("decomposition error: {0}")]
    Decomposition(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("normalization bank for task {0} is frozen")]
    BankFrozen(usize),
    #[error("no normalization bank or head for task {0}")]
    MissingBank(usize),
    #[error("recovery error: {0}")]
    Recovery(String),
    #[error("stale recovery for task {0}: conv weights changed since the last recovery pass")]
    StaleRecovery(usize),
    #[error("data error: {0}")]
    Data(String),
    #[error("task {0} has already been trained")]
    DuplicateTask(usize),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("diagnostic error: {0}")]
    Diagnostic(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("setup error: {0}")]
    Setup(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
