use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Broad class of a failure, used by front ends to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Usage,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Inconsistent or out-of-range configuration.
    InvalidConfig(String),
    /// Input data of the wrong rank, length or shape.
    InvalidInput(String),
    /// A NaN or infinity surfaced; `layer` names the offending layer when known.
    NonFinite {
        layer: Option<usize>,
        what: &'static str,
    },
    /// `backward` was handed targets that do not belong to the forward pass.
    StaleActivations,
    /// Malformed dataset bytes.
    Ingest { offset: usize, reason: String },
    /// The situation needs a pre-trained model and none was supplied.
    MissingCheckpoint(&'static str),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::MissingCheckpoint(_) => ErrorKind::Config,
            Error::InvalidInput(_) | Error::Ingest { .. } => ErrorKind::Data,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            Error::StaleActivations => ErrorKind::Usage,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::NonFinite {
                layer: Some(l),
                what,
            } => {
                write!(f, "numeric overflow: non-finite {what} in layer {l}")
            }
            Error::NonFinite { layer: None, what } => {
                write!(f, "numeric overflow: non-finite {what}")
            }
            Error::StaleActivations => {
                write!(
                    f,
                    "activations do not belong to the supplied targets; rerun forward"
                )
            }
            Error::Ingest { offset, reason } => {
                write!(f, "ingestion error at byte {offset}: {reason}")
            }
            Error::MissingCheckpoint(what) => write!(f, "missing checkpoint: {what}"),
        }
    }
}

impl core::error::Error for Error {}
