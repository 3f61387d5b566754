//! Error type shared by every module in the engine.

/// Errors produced by kernels, analyses, fixture IO, and configuration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: String,
    },

    #[error("empty attention support")]
    EmptySupport,

    #[error("empty sequence")]
    EmptySequence,

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("operation count mismatch for {counter}: measured {measured}, analytic {analytic}")]
    CountMismatch {
        counter: &'static str,
        measured: u64,
        analytic: u64,
    },

    #[error("bad fixture file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(left: &[usize], right: &[usize], context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context: context.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
