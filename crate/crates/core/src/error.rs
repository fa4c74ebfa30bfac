use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error families, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Checkpoint,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model list is empty")]
    EmptyModelList,

    #[error("wrong number of models: {0}")]
    Arity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input too small: {0}")]
    TooSmall(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shard {shard} referenced by {index} is missing")]
    MissingShard { index: PathBuf, shard: PathBuf },

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("tensor `{name}` has rank {rank}; only rank 1 and 2 are supported")]
    UnsupportedRank { name: String, rank: usize },

    #[error("checkpoints are not homologous: {0}")]
    NotHomologous(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("while merging tensor `{name}`: {source}")]
    Tensor {
        name: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn in_tensor(self, name: &str) -> Self {
        match self {
            e @ Error::Tensor { .. } => e,
            e => Error::Tensor {
                name: name.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Arity(_) => ErrorKind::Config,
            Error::Format { .. }
            | Error::MissingShard { .. }
            | Error::UnknownTensor(_)
            | Error::UnsupportedRank { .. }
            | Error::NotHomologous(_)
            | Error::Io { .. } => ErrorKind::Checkpoint,
            Error::InvalidTensor(_)
            | Error::ShapeMismatch(_)
            | Error::EmptyModelList
            | Error::TooSmall(_)
            | Error::EmptyInput(_) => ErrorKind::Numeric,
            Error::Tensor { source, .. } => match source.kind() {
                ErrorKind::Config => ErrorKind::Config,
                ErrorKind::Checkpoint => ErrorKind::Checkpoint,
                ErrorKind::Numeric => ErrorKind::Numeric,
            },
        }
    }
}
