use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures decoding a bundle or checkpoint file. Each variant has a stable
/// numeric code.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content: {0}")]
    Malformed(String),
}

impl FormatError {
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::VersionMismatch { .. } => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::Checksum { .. } => 4,
            FormatError::Malformed(_) => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value at stage `{stage}`{}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    NonFinite { stage: String, row: Option<usize> },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("k = {k} out of range 1..={slots}")]
    TopKRange { k: usize, slots: usize },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: i64, classes: usize },
    #[error("unknown fusion variant `{0}`")]
    UnknownVariant(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: u64, loss: f64 },
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failure while
    /// doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Json { .. }
                | Error::Geometry(_)
                | Error::TopKRange { .. }
                | Error::InvalidLabel { .. }
                | Error::UnknownVariant(_)
                | Error::Split(_)
                | Error::Empty(_)
        )
    }
}
