use thiserror::Error;

/// Errors raised anywhere in the training / attribution pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("step called on a terminated environment")]
    StepAfterDone,
    #[error("environment `{0}` is not tabular")]
    NotTabular(&'static str),
    #[error("action {action} outside action space of size {n_actions}")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("buffer holds no records")]
    NoRecords,
    #[error("validation buffer for the return target is empty")]
    EmptyValidation,
    #[error("step trace holds no parameter checkpoints")]
    MissingCheckpoints,
    #[error("advantage oracle unavailable: {0}")]
    OracleUnavailable(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("similarity graph has no edges")]
    NoEdges,
    #[error("need at least two positive-influence records, found {0}")]
    TooFewPositive(usize),
    #[error("need at least two seeds, found {0}")]
    TooFewSeeds(usize),
    #[error("{0}")]
    Config(String),
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
