use alloc::string::String;
use core::fmt;

/// Errors raised by the estimation stack.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    InvalidParameter { name: &'static str, reason: String },
    DimensionMismatch { expected: usize, found: usize },
    NormOutOfRange { norm: f64, bound: f64 },
    NotSymmetric { asymmetry: f64 },
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    NotOrthonormal { deviation: f64 },
    /// A partitioning step was requested on a bin with a maximal shell index.
    NonPartitioningBin,
    /// The symmetric eigen-solver did not converge on a fitted bin.
    EigenSolverFailed { layer: usize },
    StreamExhausted { needed: usize, received: usize },
    /// `finish` was called before every layer received its full batches.
    OracleIncomplete { layer: usize },
}

impl CoreError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidParameter { name, reason } => {
                write!(f, "invalid parameter `{name}`: {reason}")
            }
            CoreError::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            CoreError::NormOutOfRange { norm, bound } => {
                write!(f, "vector norm {norm} exceeds bound {bound}")
            }
            CoreError::NotSymmetric { asymmetry } => {
                write!(f, "matrix is not symmetric (max asymmetry {asymmetry:e})")
            }
            CoreError::NotPositiveSemidefinite { min_eigenvalue } => {
                write!(f, "matrix is indefinite (min eigenvalue {min_eigenvalue:e})")
            }
            CoreError::NotOrthonormal { deviation } => {
                write!(f, "basis is not orthonormal (deviation {deviation:e})")
            }
            CoreError::NonPartitioningBin => write!(f, "bin has no children: a shell index is maximal"),
            CoreError::EigenSolverFailed { layer } => {
                write!(f, "symmetric eigen-solver failed to converge on layer {layer}")
            }
            CoreError::StreamExhausted { needed, received } => {
                write!(f, "sample stream ended after {received} of {needed} samples")
            }
            CoreError::OracleIncomplete { layer } => {
                write!(f, "oracle finished while layer {layer} was still collecting samples")
            }
        }
    }
}

impl core::error::Error for CoreError {}
