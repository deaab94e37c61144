use std::fmt;

use ivr_core::Error;

/// A failure with its exit code and machine-readable tag.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub exit: i32,
    pub msg: String,
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MODEL: i32 = 4;
pub const EXIT_CORRUPT: i32 = 5;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: "usage_error", exit: EXIT_USAGE, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError { code: "io_error", exit: EXIT_IO, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the message on one line
        write!(f, "{}: {}", self.code, self.msg.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        let (code, exit) = match e {
            Error::Io(_) => ("io_error", EXIT_IO),
            Error::Model(_) => ("model_mismatch", EXIT_MODEL),
            Error::Decode { .. } => ("decode_error", EXIT_CORRUPT),
            Error::Format(_) => ("format_error", EXIT_CORRUPT),
            Error::Config(_) | Error::Index(_) => ("config_error", EXIT_USAGE),
            Error::Insufficient(_) => ("insufficient_data", EXIT_USAGE),
            Error::Dimension { .. } | Error::PaddingRequired { .. } | Error::Contract(_) | Error::Unavailable(_) => {
                ("contract_violation", EXIT_USAGE)
            }
        };
        CliError { code, exit, msg }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(e) => CliError::io(e.to_string()),
            other => CliError { code: "format_error", exit: EXIT_CORRUPT, msg: other.to_string() },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
