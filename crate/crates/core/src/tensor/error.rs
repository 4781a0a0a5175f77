use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("{op}: invalid attribute: {detail}")]
    Attribute { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; rebuild the forward pass first")]
    BackwardTwice,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("gradient check needs a deterministic function: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("parameter `{0}` not found")]
    UnknownParameter(String),

    #[error("checkpoint segment is corrupt: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
