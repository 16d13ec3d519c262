use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("box {bbox} does not fit a {width}x{height} frame")]
    OutOfFrame {
        bbox: String,
        width: u32,
        height: u32,
    },

    #[error("mask is empty: {0}")]
    EmptyMask(&'static str),

    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("timestep {t} out of range for this operation (schedule length {len})")]
    Timestep { t: usize, len: usize },

    #[error("backend `{backend}` has no injection site `{site}`")]
    UnknownSite { backend: String, site: String },

    #[error("unknown backend `{0}`")]
    UnknownBackend(String),

    #[error("unknown embedder `{0}`")]
    UnknownEmbedder(String),

    #[error("external adapter `{0}` is registered but not available in this build")]
    AdapterUnavailable(String),

    #[error("case `{0}` not found in prompt library")]
    MissingCase(String),

    #[error("config validation failed: {0}")]
    Validation(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Wraps this error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by bad configuration or inputs rather than a
    /// failure while computing.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Stage { .. })
    }
}
