use std::path::PathBuf;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on a value with no recorded graph")]
    NoGraph,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("epoch {epoch} out of range [0, {total})")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, specs, arguments)
    /// rather than failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::UnknownKey(_)
                | Error::InvalidSchedule(_)
                | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
