use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for length {len} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
