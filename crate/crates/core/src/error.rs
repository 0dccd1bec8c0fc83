use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not line up (layer widths, message lengths, plans).
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity showed up somewhere it must not.
    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// API misuse, e.g. backward on a tape recorded in eval mode.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
