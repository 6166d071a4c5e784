//! Error type shared by every module in this crate.

use alloc::string::String;
use core::fmt;

/// Failure modes of the pipeline and its kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// A tensor was constructed or consumed with an impossible shape.
    InvalidShape(String),
    /// A configuration value is out of range or internally inconsistent.
    InvalidConfig(String),
    /// Runtime data (image sizes, id maps, ...) violates a precondition.
    InvalidInput(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
