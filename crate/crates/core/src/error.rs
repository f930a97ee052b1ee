use thiserror::Error;

/// Errors raised by the numeric kernel and the modules built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer {layer}: expected input of dimension {expected}, found {found}")]
    LayerDimension {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unknown prompt id {0}")]
    UnknownPrompt(u32),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label sets differ: {0}")]
    LabelMismatch(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
