use std::path::PathBuf;

use thiserror::Error;

/// Failures of the IO layer and the command-line driver. Each maps to a
/// process exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 1 usage, 2 data or IO, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) | Self::Io { .. } => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<protograph_core::Error> for AppError {
    fn from(e: protograph_core::Error) -> Self {
        use protograph_core::Error as E;
        match e {
            E::NonFinite { .. } => Self::Numerical(e.to_string()),
            E::Shape { .. } | E::Label { .. } => Self::Data(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
