use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parameter sets are not congruent: {0}")]
    Congruence(String),

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
