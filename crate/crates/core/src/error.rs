use std::path::PathBuf;

/// Errors produced anywhere in the tokenizer, trainer or evaluation harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("token index {index} out of range for a codebook of {size} entries")]
    Index { index: u32, size: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("pairing error: {originals} originals vs {reconstructions} reconstructions")]
    Pairing {
        originals: usize,
        reconstructions: usize,
    },

    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("failed to load weights from {path}: {reason} (sha256: {sha256})")]
    WeightsLoad {
        path: PathBuf,
        reason: String,
        sha256: String,
    },

    #[error("checkpoint schema `{found}` cannot be loaded by this build (expected `{expected}`); re-export the checkpoint with a matching version")]
    SchemaVersion { found: String, expected: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the error category: config=2, data=3, numeric=4, io=5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SchemaVersion { .. } => 2,
            Error::Shape(_)
            | Error::Index { .. }
            | Error::Data(_)
            | Error::Pairing { .. }
            | Error::Image { .. } => 3,
            Error::Numeric(_) | Error::Tensor(_) => 4,
            Error::Io { .. } | Error::WeightsLoad { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
