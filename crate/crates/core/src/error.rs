//! Error type shared across the crate.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Dim(String),
    /// An operation was called outside its contract (non-scalar backward,
    /// empty token list, empty symmetry set, ...).
    Contract(String),
    /// Bad or inconsistent run configuration.
    Config(String),
    /// Malformed dataset/checkpoint file.
    Parse(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI: 1 for contract/config/dimension
    /// problems, 2 for anything involving files.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Contract(_) | Error::Config(_) => 1,
            Error::Parse(_) | Error::Io(_) => 2,
        }
    }
}
