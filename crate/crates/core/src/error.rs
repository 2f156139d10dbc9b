use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid factor space: {0}")]
    InvalidSpace(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("index {index} out of range for space with {total} combinations")]
    IndexOutOfRange { index: u64, total: u64 },
    #[error("render error: {0}")]
    Render(String),
    #[error("puzzle generation failed: {0}")]
    Generation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
