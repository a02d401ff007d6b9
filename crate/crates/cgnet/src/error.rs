use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor ops, model construction, training and I/O.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{op} expects a scalar tensor, got {shape}")]
    NonScalar { op: &'static str, shape: String },

    #[error("backward requires a loss built from tensors with requires_grad")]
    NoGradPath,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument for {op}: {details}")]
    InvalidArgument { op: &'static str, details: String },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint inventory mismatch: {0}")]
    CheckpointInventory(String),

    #[error("image format error: {0}")]
    ImageFormat(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn arg(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            details: details.into(),
        }
    }

    /// Process exit code taxonomy: 1 usage/config, 2 I/O or file format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => 1,
            Error::Io(_)
            | Error::ImageFormat(_)
            | Error::CheckpointVersion { .. }
            | Error::CheckpointCorrupt(_)
            | Error::CheckpointInventory(_) => 2,
            Error::NonFinite { .. } | Error::NonScalar { .. } | Error::NoGradPath => 3,
        }
    }
}
