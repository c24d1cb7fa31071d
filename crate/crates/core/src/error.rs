use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty alignment")]
    EmptyAlignment,

    #[error("bad magic in tensor container {path}: expected \"KMTF\"")]
    BadMagic { path: PathBuf },

    #[error("truncated tensor container {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("unknown dtype code {code} in record {name:?}")]
    UnknownDtype { code: u8, name: String },

    #[error("duplicate record name {0:?}")]
    DuplicateName(String),

    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: String },

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("target of length {target_len} is not admissible in {frames} frames (needs {required})")]
    CtcInadmissible {
        target_len: usize,
        frames: usize,
        required: usize,
    },

    #[error("unknown speaker id {id} (speaker count {count})")]
    UnknownSpeaker { id: usize, count: usize },

    #[error("missing file for sample {sample}: {path}")]
    MissingFile { sample: String, path: PathBuf },

    #[error("stage {stage} failed (config {config_hash}): {source}")]
    Stage {
        stage: String,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
