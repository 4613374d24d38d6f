use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied inconsistent or out-of-range input.
    #[error("invalid input: {0}")]
    Input(String),

    /// Cholesky factorization kept failing up to the jitter cap.
    #[error("factorization failed (last jitter tried: {jitter:e})")]
    Factorization { jitter: f64 },

    /// A non-finite value appeared in a named intermediate quantity.
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

/// Fails with [`Error::NonFinite`] naming `tensor` if any value is NaN or infinite.
pub(crate) fn ensure_finite<'a>(
    tensor: &str,
    values: impl IntoIterator<Item = &'a f64>,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            tensor: tensor.to_string(),
        })
    }
}
