use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to write dataset file {path}: {source}")]
    DatasetWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest not found: {0}")]
    ManifestMissing(PathBuf),
    #[error("malformed manifest row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("video {video_id}: frame_index {found} at line {line}, expected {expected}")]
    NonConsecutiveFrames {
        video_id: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("label {label} at line {line} is out of range for {n_classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        n_classes: usize,
    },
    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("image batch must contain at least one image")]
    EmptyBatch,
    #[error("size {size} is not divisible by patch size {patch}")]
    Divisibility { size: usize, patch: usize },
    #[error("masking would keep zero of {len} tokens (keep fraction {keep_fraction})")]
    EmptySequence { len: usize, keep_fraction: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cannot batch sequences: {0}")]
    Batching(String),
    #[error("non-finite value at {location}{}", step.map(|s| format!(" (step {s})")).unwrap_or_default())]
    NonFinite { location: String, step: Option<u64> },
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("selection too small: {0}")]
    TooSmall(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
