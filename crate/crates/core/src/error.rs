use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: tape already differentiated; call release() first")]
    BackwardTwice,

    #[error("forward: tape must be empty or released before a new forward pass")]
    TapeNotReleased,

    #[error("layer {layer} out of range 1..={num_layers}")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence too short: {loss} needs at least {required} frames, got {got}")]
    SequenceTooShort { loss: &'static str, required: usize, got: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("{what} at byte offset {offset}: {detail}")]
    Format { what: &'static str, offset: u64, detail: String },

    #[error("memory model mismatch: {0}")]
    MemoryMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
