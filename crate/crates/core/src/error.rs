use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fit error: {0}")]
    Fit(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unseen category {value:?} for feature {feature:?}")]
    Vocab { feature: String, value: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("window of length {window} does not fit a series of length {len}")]
    Window { len: usize, window: usize },
    #[error("training diverged: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("bundle error: {0}")]
    Bundle(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Bundle(_) => 2,
            Error::Fit(_)
            | Error::Schema(_)
            | Error::Vocab { .. }
            | Error::Data(_)
            | Error::Window { .. }
            | Error::Io { .. }
            | Error::Parse { .. } => 3,
            Error::Training(_) => 4,
            Error::Eval(_) => 5,
        }
    }
}
