//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// A statistic was requested before enough history exists. Distinct from
    /// an error: callers are expected to keep feeding the state machine.
    #[error("not ready: {0}")]
    NotReady(&'static str),

    /// Non-finite numerics surfaced mid-run; the run must abort.
    #[error("run aborted at step {step}: {detail}")]
    RunAbort { step: u64, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 runtime abort, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::RunAbort { .. } => 3,
            Error::Io(_) | Error::Parse { .. } => 4,
            _ => 2,
        }
    }
}
