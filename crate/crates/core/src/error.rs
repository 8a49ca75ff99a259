use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated tensor payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("manifest error: missing feature files for ids {}", missing.join(", "))]
    MissingFeatures { missing: Vec<String> },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate reference: seed features cancel to a zero mean")]
    DegenerateReference,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("stage `{stage}` failed for `{concept}`: {source}")]
    Stage {
        stage: String,
        concept: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn in_stage(self, stage: &str, concept: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            concept: concept.to_string(),
            source: Box::new(self),
        }
    }
}
