use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes: configuration
/// and validation problems exit with 1, runtime failures (I/O, divergence)
/// exit with 2.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid permutation {order:?} for rank-{rank} tensor")]
    InvalidPermutation { order: Vec<usize>, rank: usize },

    #[error("element count mismatch: shape {shape:?} implies {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward called on a non-recording tape")]
    NotRecording,

    #[error("zero vector passed to cosine similarity")]
    ZeroVector,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code class: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Divergence(_) | Error::CheckpointFormat(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
