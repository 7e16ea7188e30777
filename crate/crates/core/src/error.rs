use std::io;
use std::path::PathBuf;

/// Errors raised anywhere in the training and evaluation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// A text input (manifest, config) could not be parsed.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Input data fell outside the accepted domain (e.g. a bad transcript).
    #[error("validation error: {0}")]
    Validation(String),

    /// A binary file had a bad magic, version, checksum or length.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// A checkpoint on disk was produced by a different configuration.
    #[error("fingerprint mismatch for {path}: checkpoint {found}, config {expected}")]
    FingerprintMismatch {
        path: String,
        found: String,
        expected: String,
    },

    /// Non-finite values or a failed numeric tolerance.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Format { .. }
            | Error::FingerprintMismatch { .. }
            | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
