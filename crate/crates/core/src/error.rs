use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint corrupted: stored crc {stored:#010x}, computed {computed:#010x}")]
    Corruption { stored: u32, computed: u32 },

    #[error("incompatible tensor \"{name}\": checkpoint {found:?}, expected {expected:?}")]
    Incompatible {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
