//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A named parameter is missing from a checkpoint or parameter set.
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),

    /// An invalid experiment or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Bad input data (labels, counts, corpus rows).
    #[error("data error: {0}")]
    Data(String),

    /// A malformed checkpoint file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 usage/config, 3 data, 4 format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Format { .. } | Error::MissingParameter(_) => 4,
        }
    }
}
