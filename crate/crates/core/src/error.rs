use std::path::PathBuf;

/// Errors raised by the library.
///
/// Variants fall in two families: contract violations (bad input, bad
/// configuration, shape mismatch) and environment failures (I/O, numerics).
/// The CLI maps the first family to exit code 1 and the second to 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("observation angle undefined: box center coincides with the sensor axis")]
    UndefinedAngle,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the caller's input rather than the environment.
    pub fn is_contract(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Numeric(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
