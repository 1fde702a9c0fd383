use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed input file; `offset` is the byte position where parsing stopped.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported operation: {0}")]
    UnsupportedOperation(String),

    /// The attack needs input gradients the detector cannot provide.
    #[error("unsupported attack target: {0}")]
    UnsupportedTarget(String),

    #[error("training diverged: {message}")]
    TrainingDiverged { message: String, loss_trace: Vec<f64> },

    /// Bayar projection is undefined when the off-center weights sum to zero.
    #[error("degenerate constrained kernel (off-center sum {0:e})")]
    DegenerateKernel(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
