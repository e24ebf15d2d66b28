use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("special token {0:?} already present")]
    DuplicateSpecial(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("class {0:?} has no samples in the {1} split")]
    EmptyClass(String, String),
    #[error("unknown LoRA target {name:?}; available: {available:?}")]
    UnknownTarget {
        name: String,
        available: Vec<String>,
    },
    #[error("sequence of length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
