use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),

    #[error("entry {index} has value {value}, outside the {method} value set")]
    OutOfValueSet {
        index: usize,
        value: f64,
        method: &'static str,
    },

    #[error("non-finite gradient in weight group `{0}`")]
    NonFiniteGradient(String),

    #[error("target index {target} out of vocabulary of size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },

    #[error("jacobian requested at step {0}: no predecessor state")]
    NoPredecessor(usize),

    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),

    #[error("data: {0}")]
    Data(String),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }
}
