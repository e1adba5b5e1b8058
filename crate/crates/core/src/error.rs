use std::path::PathBuf;

use crate::io::config::ConfigError;
use crate::io::nifti::NiftiError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("stage {stage}, iteration {iteration}: {source}")]
    Iterate {
        stage: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("transform folds: {0}")]
    Folding(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error(transparent)]
    Nifti(#[from] NiftiError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numbers rather than by the inputs'
    /// shape or encoding.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::EmptyMask(_) | Error::Folding(_) | Error::NonFinite(_) | Error::Undefined(_) => {
                true
            }
            Error::Iterate { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
