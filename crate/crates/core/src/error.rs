use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the landmark pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("annotation error in {path}: {reason}")]
    Annotation { path: PathBuf, reason: String },

    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("missing artifact {path}: run `cc2d {producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("image {id}: {source}")]
    PerImage {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::InvalidInput(_) | Error::Shape(_) | Error::OutOfBounds(_) => "input",
            Error::NonFinite(_) => "numeric",
            Error::Annotation { .. } | Error::Image { .. } => "data",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::PerImage { source, .. } => source.category(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
