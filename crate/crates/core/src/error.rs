//! Error type shared across the library.
//!
//! Every fallible operation returns [`Error`]; variants carry enough context
//! (paths, video ids, offending values) that a message alone is actionable.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is outside its documented domain.
    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },

    /// Inputs whose shapes or lengths must agree did not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A dataset-level contract was violated (missing video, bad index, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// File I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// PNG decode/encode failure, annotated with the path involved.
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// JSON (de)serialization failure, annotated with the path involved.
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A checkpoint file is corrupt or from an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (NaN/inf loss) and was aborted.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}
