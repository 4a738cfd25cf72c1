use std::io;

use thiserror::Error;

/// Every failure the simulator can report.
///
/// The variants map onto the error classes a caller needs to distinguish:
/// user-facing configuration and format problems versus internal numeric or
/// protocol faults.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error in tensor {tensor}: {msg}")]
    Numeric { tensor: String, msg: String },

    #[error("protocol error (sender {sender}, tensor {tensor}): {msg}")]
    Protocol { sender: u32, tensor: u32, msg: String },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config parse error at line {line}, key `{key}`: {msg}")]
    Parse { line: usize, key: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by user input (bad files, bad configs) rather
    /// than internal faults.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
