use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("wav format error in {path:?}: {reason}")]
    WavFormat { path: PathBuf, reason: String },

    #[error("stream decode error: {0}")]
    StreamDecode(String),

    #[error("stream truncated inside packet {packet_index}")]
    StreamTruncated { packet_index: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("missing prerequisite: run `{command}` first ({detail})")]
    MissingPrerequisite { command: String, detail: String },

    #[error("cluster-model hash mismatch: bank was trained against a different cluster model")]
    ClusterHashMismatch,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
