use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("denoising diverged at Euler step {step}")]
    Divergence { step: usize },

    #[error("training diverged at step {step} (loss {loss:e})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("buffer backpressure: write to step {requested} would exceed capacity {capacity} ahead of read cursor {read}")]
    Backpressure {
        requested: u64,
        read: u64,
        capacity: usize,
    },

    #[error("cycle {0} already pushed")]
    DuplicateCycle(u64),

    #[error("session aborted after {consecutive} consecutive underflows at step {step}")]
    Starvation { step: u64, consecutive: usize },

    #[error("config error at {pointer}: {reason}")]
    Config { pointer: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite<'a>(
    what: &'static str,
    values: impl IntoIterator<Item = &'a f64>,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
