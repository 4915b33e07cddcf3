//! One error type for the whole crate, split by what went wrong rather than
//! by module. The CLI maps these onto exit codes: usage, format, input, and
//! spec problems exit 2; invariant violations found at run time exit 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Values are structurally fine but semantically invalid (labels out of
    /// range, non-finite entries, empty datasets).
    #[error("input error: {0}")]
    Input(String),

    /// The caller misused an interface (backward on a non-scalar, batch of
    /// one in batchnorm training, oracle dimension too large).
    #[error("usage error: {0}")]
    Usage(String),

    /// A network spec cannot be built (dimension chain broken, layer too
    /// small, unknown scheme name).
    #[error("spec error: {0}")]
    Spec(String),

    /// A file did not parse. `offset` is the byte position for binary files.
    #[error("format error: {msg}{}", offset.map(|o| format!(" (byte {o})")).unwrap_or_default())]
    Format { msg: String, offset: Option<u64> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
    pub fn format(msg: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Format {
            msg: msg.into(),
            offset,
        }
    }
}
