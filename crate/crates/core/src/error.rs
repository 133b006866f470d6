use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("empty neighborhood: softmax mask has no true entry")]
    EmptyNeighborhood,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
