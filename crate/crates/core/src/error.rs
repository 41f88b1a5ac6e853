use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("label id {id} out of range for vocabulary of size {size}")]
    LabelOutOfRange { id: usize, size: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing cached activations: {0}")]
    MissingCache(&'static str),
    #[error("non-finite loss at step {0}")]
    Diverged(u64),
    #[error("no reference for sample {0:?}")]
    MissingReference(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
