use thiserror::Error;

/// Errors produced by the analysis pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// An argument violated a precondition (bad kernel size, dimension
    /// mismatch, out-of-range value, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was called on an object in the wrong state, e.g. a
    /// background model that has never seen a frame.
    #[error("invalid state: {0}")]
    State(String),

    /// A serialized artifact (model file, report, scene spec) is corrupt
    /// or has an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    /// Training cannot proceed (single-class data, too few examples).
    #[error("training error: {0}")]
    Training(String),

    /// A per-capillary metric is undefined for this record (zero reference
    /// area, all-zero flow).
    #[error("undefined for record: {0}")]
    UndefinedRecord(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }

    pub fn undefined_record(msg: impl Into<String>) -> Self {
        Error::UndefinedRecord(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
