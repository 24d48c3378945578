use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum KwsError {
    /// Tensor operands with incompatible extents. `op` names the operation,
    /// `detail` names the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Malformed or unsupported audio input; `field` names the header field
    /// that failed validation.
    #[error("audio format error in {path}: field `{field}`: {detail}")]
    AudioFormat {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("speaker id `{0}` is not registered in the embedding table")]
    UnknownSpeaker(String),

    #[error("speaker id `{0}` is already registered")]
    DuplicateSpeaker(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KwsError>;
