use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the tensor engine and everything built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: input out of domain at element {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{op}: division by zero at element {index}")]
    DivisionByZero { op: &'static str, index: usize },

    #[error("{op}: produced non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("matrix is singular (|det| = {abs_det:e})")]
    Singular { abs_det: f64 },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: graph already freed")]
    GraphFreed,

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("gradient check: function returned non-finite value {0}")]
    NonFiniteObjective(f64),

    #[error("noise loss needs at least one {0} pair in the batch")]
    MissingPairs(&'static str),

    #[error("empty pair set for {0}")]
    EmptyPairs(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: parse error at byte {offset}: {reason}")]
    Parse {
        context: String,
        offset: usize,
        reason: String,
    },

    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, offset: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::MissingPairs(_) | Error::EmptyPairs(_) => ErrorClass::Config,
            Error::Io { .. } | Error::Parse { .. } | Error::Format(_) => ErrorClass::Io,
            _ => ErrorClass::Numeric,
        }
    }
}
