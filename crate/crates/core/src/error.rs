use thiserror::Error;

/// Crate-wide error type. Every variant maps to a stable machine-parsable
/// code via [`Error::code`]; the CLI prints that code on its single failure
/// line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("bound exceeded: {0}")]
    Bound(String),
    #[error("frozen parameters violated: {0}")]
    Frozen(String),
    #[error("distribution universes differ: {0}")]
    Universe(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "nonfinite",
            Error::NotScalar { .. } => "notscalar",
            Error::TapeConsumed => "tape",
            Error::Vocab(_) => "vocab",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Bound(_) => "bound",
            Error::Frozen(_) => "frozen",
            Error::Universe(_) => "universe",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
