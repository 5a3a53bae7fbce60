use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("vocabulary error: channel `{channel}` id {id} outside [0, {vocab})")]
    Vocabulary {
        channel: String,
        id: u64,
        vocab: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("length mismatch: channel `{first}` has {first_len} tokens but `{second}` has {second_len}")]
    LengthMismatch {
        first: String,
        first_len: usize,
        second: String,
        second_len: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint incompatible: {}", .0.join("; "))]
    CheckpointIncompatible(Vec<String>),

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Coarse category shown in command-line messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Schema(_) | Error::Parse { .. } | Error::Vocabulary { .. } | Error::LengthMismatch { .. } => "data",
            Error::CheckpointIncompatible(_) | Error::CheckpointCorrupt(_) | Error::CheckpointVersion { .. } => "checkpoint",
            Error::Numeric(_) | Error::Diverged { .. } => "numeric",
            Error::Io { .. } => "io",
            Error::Shape { .. } | Error::Contract(_) | Error::UndefinedMetric(_) => "internal",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
