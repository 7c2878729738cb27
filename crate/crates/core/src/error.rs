use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("prompts for step {0} are already initialized")]
    AlreadyInitialized(usize),
    #[error("unknown key: {0}")]
    Key(String),
    #[error("missing classifier source: {0}")]
    MissingSource(&'static str),
    #[error("identity {0} has no training images")]
    EmptyIdentity(usize),
    #[error("epoch {epoch} outside schedule horizon {horizon}")]
    InvalidEpoch { epoch: usize, horizon: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("data leak: {0}")]
    DataLeak(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing reports: {0}")]
    MissingReports(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

/// Coarse error classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self.root() {
            Error::Config { .. } => ErrorClass::Config,
            Error::MissingFile(_)
            | Error::Schema(_)
            | Error::Protocol(_)
            | Error::PngDecode(_)
            | Error::MissingReports(_)
            | Error::DataLeak(_)
            | Error::VersionMismatch(_)
            | Error::Integrity(_) => ErrorClass::Data,
            _ => ErrorClass::Runtime,
        }
    }
}
