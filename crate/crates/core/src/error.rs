use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("device {to} is unreachable from device {from}")]
    Unreachable { from: usize, to: usize },
    #[error("registration error: {0}")]
    Registration(String),
    #[error("workload error: {0}")]
    Workload(String),
    #[error("state error: {0}")]
    State(String),
    #[error("classification error: {0}")]
    Classification(String),
    #[error("context error: {0}")]
    Context(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("tractability error: {0}")]
    Tractability(String),
    #[error("forwarding error: {0}")]
    Forwarding(String),
    #[error("agent error: {0}")]
    Agent(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("prediction error: {0}")]
    Prediction(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}
