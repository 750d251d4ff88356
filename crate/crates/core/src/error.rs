use thiserror::Error;

/// Errors surfaced by the vocoder engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor/weight shape mismatch; the message carries both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN or Inf escaped a numeric kernel.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a documented data contract (e.g. a harmonic
    /// distribution row not summing to one).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("config error: {0}")]
    Config(String),

    /// Skip signal: the utterance is shorter than the requested crop.
    #[error("utterance too short for crop: {0}")]
    CropTooShort(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
