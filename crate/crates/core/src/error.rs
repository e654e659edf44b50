use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: wrong dimensions, unknown keys, invalid values.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// API used out of order, e.g. backward without a forward cache.
    #[error("usage error: {0}")]
    Usage(&'static str),

    #[error("environment contract violation: {0}")]
    EnvContract(String),

    #[error("malformed episode: {0}")]
    Episode(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } => 2,
            _ => 3,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            found,
        })
    }
}

pub(crate) fn check_finite(what: &'static str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
