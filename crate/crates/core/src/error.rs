use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("thinning bound violated for transition {from}->{to} at t = {t} (rate {rate} > bound {bound})")]
    ThinningBound {
        from: usize,
        to: usize,
        t: f64,
        rate: f64,
        bound: f64,
    },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Topology(_)
            | Error::Invalid(_)
            | Error::UnknownPreset(_)
            | Error::Config(_) => 2,
            Error::Integration { .. } | Error::ThinningBound { .. } | Error::Training(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}
