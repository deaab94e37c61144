use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("spatial extent {extent} is not a multiple of {multiple}; pad the input first")]
    PaddingRequired { extent: usize, multiple: usize },

    #[error("feature unavailable: {0}")]
    Unavailable(String),

    #[error("model mismatch: {0}")]
    Model(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("corrupt stream at byte {offset}: {msg}")]
    Decode { offset: usize, msg: String },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(axis: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            axis,
            expected,
            got,
        }
    }
}
