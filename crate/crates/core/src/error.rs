use std::io;

use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    EmptyExtent([usize; 4]),
    #[error("shape {0:?} overflows the element count")]
    ShapeOverflow([usize; 4]),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape4, actual: Shape4 },
    #[error("{0}")]
    InvalidShape(String),
    #[error("extent {extent} on axis {axis} is not divisible by factor {factor}")]
    NotDivisible {
        axis: char,
        extent: usize,
        factor: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("format error in {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Process exit-code classes shared by every command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::EmptyExtent(_)
            | Error::ShapeOverflow(_)
            | Error::ShapeMismatch { .. }
            | Error::InvalidShape(_)
            | Error::NotDivisible { .. } => ErrorClass::Usage,
            Error::Graph(_)
            | Error::UndefinedMetric(_)
            | Error::Format { .. }
            | Error::Data(_)
            | Error::Io { .. } => ErrorClass::Data,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
