use thiserror::Error;

#[derive(Debug, Error)]
pub enum CapaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("layer {0} runs in hadamard mode but has no calibrated alpha vector")]
    Uncalibrated(usize),

    #[error("layer {0} was not probed")]
    NotProbed(usize),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CapaError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> CapaError {
    CapaError::Shape {
        op,
        detail: detail.into(),
    }
}
