//! Crate-wide error type.
//!
//! Configuration problems (bad shapes, inconsistent knobs, malformed config
//! files) are reported as [`Error::Config`] and map to process exit code 2 in
//! the CLI; everything that goes wrong at run time (I/O, numeric failure,
//! corrupt checkpoints) maps to exit code 1.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration or arguments. The message names the violated
    /// constraint.
    Config(String),
    /// Failure while running: I/O, corrupt files, numeric breakdown.
    Runtime(String),
    /// Wrapped I/O error with a path or context string.
    Io(String, std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Runtime(msg) => write!(f, "runtime error: {msg}"),
            Error::Io(ctx, e) => write!(f, "i/o error ({ctx}): {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(_, e) => Some(e),
            _ => None,
        }
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn io(ctx: impl Into<String>, e: std::io::Error) -> Self {
        Error::Io(ctx.into(), e)
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_distinguish_config_from_runtime() {
        assert_eq!(Error::config("bad").exit_code(), 2);
        assert_eq!(Error::runtime("bad").exit_code(), 1);
        let ioe = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(Error::io("reading x", ioe).exit_code(), 1);
    }

    #[test]
    fn display_names_the_class() {
        let msg = format!("{}", Error::config("window must exceed chunk"));
        assert!(msg.contains("config error"));
        assert!(msg.contains("window must exceed chunk"));
    }
}
