use std::path::PathBuf;

/// Errors produced by the reconstruction library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frequency {rho} exceeds Nyquist {nyquist} (cycles/Å)")]
    AboveNyquist { rho: f64, nyquist: f64 },

    #[error("pose direction is not unit length (norm {0})")]
    NonUnitDirection(f64),

    #[error("quadrature mismatch: {0}")]
    SchemeMismatch(String),

    #[error("importance state belongs to scheme generation {state}, current generation is {scheme}")]
    StaleImportanceState { state: u64, scheme: u64 },

    #[error("negative voxel {index} (value {value}) under exponential prior")]
    NegativeVoxel { index: usize, value: f64 },

    #[error("no pixels outside radius {radius} Å")]
    EmptyBoundary { radius: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical procedure itself (as opposed to bad
    /// input data or arguments).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
