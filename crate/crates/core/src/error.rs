use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward root must hold exactly one element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("line {line}: label {value:?} is not 0 or 1")]
    InvalidLabel { line: u64, value: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate statement id {0}")]
    DuplicateId(u64),
    #[error("text is empty after cleaning")]
    DegenerateInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss became non-finite at optimizer step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint payload truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {0} is unexpected or duplicated")]
    UnexpectedTensor(String),
    #[error("malformed checkpoint config: {0}")]
    CheckpointConfig(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
