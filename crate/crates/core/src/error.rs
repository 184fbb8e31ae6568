use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("mask is not aligned with parameters: {0}")]
    Alignment(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("not found: {0}")]
    Lookup(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("nothing left to prune: {0}")]
    EmptyDomain(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("training diverged at round {round}, iteration {iteration}: {reason}")]
    Training {
        round: usize,
        iteration: usize,
        reason: String,
    },
    #[error("invalid group mapping: {0}")]
    Mapping(String),
    #[error("checkpoint format error in {tensor}: {reason}")]
    Format { tensor: String, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
