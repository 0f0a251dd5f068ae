use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no credential for round {round} (credential set covers {available} rounds)")]
    NoCredential { round: u32, available: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed encoding: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown {kind} strategy `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },
    #[error("no verified updates to aggregate")]
    NoAggregation,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
