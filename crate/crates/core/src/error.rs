use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model `{0}` is already registered")]
    DuplicateModel(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid extractor spec `{id}`: {reason}")]
    InvalidSpec { id: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("probe failed: {0}")]
    Probe(String),
    #[error("selection failed: {0}")]
    Selection(String),
    #[error("augmentation: {0}")]
    Augmentation(String),
    #[error("metric failed: {0}")]
    Metric(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("data: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
