use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scene placement failed: could not place object {object} after {attempts} attempts")]
    Placement { object: usize, attempts: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("class set: {0}")]
    ClassSet(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
