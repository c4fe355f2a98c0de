use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or misuse of an API (bad arguments, wrong stage order).
    #[error("config error: {0}")]
    Config(String),

    /// A manifest or data file is malformed or violates an invariant.
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A training loop produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// A batch operation failed part-way through.
    #[error("{source} (completed {done} of {total})")]
    Partial {
        done: usize,
        total: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } => 3,
            Error::Divergence(_) => 4,
            Error::Io { .. } | Error::Image { .. } => 5,
            Error::Partial { source, .. } => source.exit_code(),
        }
    }

    /// Prefix the message with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
            Error::Data(m) => Error::Data(format!("[{stage}] {m}")),
            Error::Divergence(m) => Error::Divergence(format!("[{stage}] {m}")),
            Error::Parse {
                path,
                line,
                message,
            } => Error::Parse {
                path,
                line,
                message: format!("[{stage}] {message}"),
            },
            Error::Image { path, message } => Error::Image {
                path,
                message: format!("[{stage}] {message}"),
            },
            Error::Partial {
                done,
                total,
                source,
            } => Error::Partial {
                done,
                total,
                source: Box::new(source.in_stage(stage)),
            },
            e @ Error::Io { .. } => e,
        }
    }
}
