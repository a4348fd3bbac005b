use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dense size {requested} exceeds cap {cap}")]
    SizeCap { requested: usize, cap: usize },

    #[error("axis `{0}` is registered but used by no modality")]
    UnusedAxis(String),

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(
        "did not converge after {iterations} iterations \
         (step {step:e}, max projected gradient {max_gradient:e})"
    )]
    NonConvergence {
        iterations: usize,
        step: f64,
        max_gradient: f64,
    },

    #[error("estimated memory {estimate} bytes exceeds cap {cap} bytes")]
    MemoryCap { estimate: u64, cap: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
