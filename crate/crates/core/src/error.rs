use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("adjoint inconsistency: relative error {rel_error:e} exceeds {tolerance:e}")]
    AdjointMismatch { rel_error: f64, tolerance: f64 },

    #[error("{failed} of {total} ensemble members failed to converge (allowed {allowed})")]
    EnsembleFailures {
        failed: usize,
        total: usize,
        allowed: usize,
    },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}

/// Failures when reading an ensemble file.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not an ensemble file (bad magic line)")]
    BadMagic,

    #[error("unsupported ensemble format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload size {actual} bytes does not match shape ({expected} bytes expected)")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("metadata inconsistent: {0}")]
    MetadataInconsistent(String),
}

pub(crate) fn ensure_len(context: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dim(context, expected, v.len()));
    }
    Ok(())
}

pub(crate) fn ensure_finite(context: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
