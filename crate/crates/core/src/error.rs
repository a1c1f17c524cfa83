use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// A caller violated a documented precondition (bad shape, range, value).
    InvalidArgument(String),
    /// An operation was attempted in a state that forbids it
    /// (e.g. running backward twice on the same graph).
    State(String),
    /// A serialized artifact (checkpoint, grammar file, config) is malformed.
    Format(String),
    /// Training produced a non-finite loss and was aborted.
    Diverged(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Format(msg) => write!(f, "malformed input: {msg}"),
            Error::Diverged(msg) => write!(f, "training diverged: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for `Error::InvalidArgument` with a formatted message.
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
