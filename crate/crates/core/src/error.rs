use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("protocol parse error: {0}")]
    Parse(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("step {step} has no image containing its novel classes")]
    EmptyStep { step: usize },

    #[error("no valid pixels to supervise")]
    EmptySupervision,

    #[error("ROC undefined: ground truth needs at least one positive and one negative pixel")]
    UndefinedRoc,

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("verification error: {0}")]
    Verification(String),

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("run is locked by another process: {0}")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Schedule(_) | Error::Locked(_) => 1,
            Error::Data(_)
            | Error::Ingestion(_)
            | Error::EmptyStep { .. }
            | Error::EmptySupervision
            | Error::Dimension(_)
            | Error::Image { .. }
            | Error::Io { .. }
            | Error::Serde(_) => 2,
            Error::Divergence { .. }
            | Error::UndefinedRoc
            | Error::Evaluation(_)
            | Error::Plot(_) => 3,
            Error::Verification(_) | Error::Integrity(_) => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
