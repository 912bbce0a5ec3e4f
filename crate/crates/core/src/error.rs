use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("generation failed at frame {frame}: {reason}")]
    Generation { frame: usize, reason: String },
    #[error("degenerate body part `{part}`: {reason}")]
    DegeneratePart { part: String, reason: String },
    #[error("missing annotation: {0}")]
    MissingAnnotation(String),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("training diverged at iteration {iteration} ({loss} is not finite); last good checkpoint: {last_good}")]
    Divergence { iteration: usize, loss: String, last_good: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

/// Fail with [`Error::Argument`] unless `cond` holds.
macro_rules! ensure_arg {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::Error::Argument(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure_arg;
