use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or malformed input. Maps to exit code 2 in the CLI.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no children of terminal state {0:?}")]
    TerminalState(String),

    #[error("no parents of initial state")]
    InitialState,

    #[error("state {0:?} is not terminal")]
    NotTerminal(String),

    #[error("unknown terminal object {0:?}")]
    UnknownTerminal(String),

    #[error("terminal object {0:?} has zero reward")]
    ZeroReward(String),

    #[error("environment too large to enumerate ({size} terminals > cap {cap})")]
    TooLarge { size: f64, cap: u64 },

    #[error("invalid edge {from:?} -> {to:?}")]
    InvalidEdge { from: String, to: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("stale tape: parameters changed since the forward pass")]
    StaleTape,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing state-flow network (required by {0})")]
    MissingStateFlow(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by user-supplied configuration or input files.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::TooLarge { .. } | Error::UnknownTerminal(_) | Error::Io(_)
        )
    }
}
