//! Error type shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (bad dimensions, labels out
    /// of range, malformed weights, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An experiment spec file could not be parsed.
    #[error("spec parse error at line {line}: {message}")]
    SpecParse { line: usize, message: String },

    /// Training was requested on an empty example set.
    #[error("cannot train on an empty example set")]
    EmptyTrainingSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
