use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {point:?} lies outside the grid bounding box")]
    OutOfBox { point: [f64; 3] },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("view {view}: {msg}")]
    View { view: String, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint is truncated: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },

    #[error("not a checkpoint file (bad magic)")]
    CheckpointMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint shape table mismatch: {0}")]
    CheckpointShape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
