use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape(String),
    /// A node id was used on a tape that did not issue it.
    Tape(String),
    /// A documented precondition was violated.
    Contract(String),
    /// A computation produced NaN or overflowed.
    Numeric(String),
    /// Malformed input file; `offset` is the byte position where parsing failed.
    Format { offset: usize, message: String },
    Config(String),
    Io { path: PathBuf, source: std::io::Error },
    /// Optimization diverged; the partial trace has already been written.
    Divergence(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } => 3,
            Error::Numeric(_) | Error::Divergence(_) => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Tape(m) => write!(f, "tape error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte offset {offset}: {message}")
            }
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::Divergence(m) => write!(f, "divergence: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
