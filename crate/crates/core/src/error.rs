use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("lead length {len} exceeds the padded length {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid filter specification: {0}")]
    InvalidFilter(String),
    #[error("designed filter has a pole on or outside the unit circle")]
    UnstableFilter,
    #[error("unsupported sampling-rate ratio {from} Hz -> {to} Hz")]
    RateRatio { from: f64, to: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing configuration key `{0}`")]
    MissingKey(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("linear system is singular or not positive definite: {0}")]
    Singular(String),
    #[error("training diverged at epoch {epoch}: validation loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] autograd::GraphError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
