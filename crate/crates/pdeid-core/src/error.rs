//! Error type shared across the library.

use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two arguments that must agree in length or dimension do not.
    DimensionMismatch { expected: usize, got: usize },
    /// A numeric parameter violates its domain (non-positive scale, bad order, ...).
    InvalidParameter(&'static str),
    /// Requested derivative order exceeds the supported range.
    UnsupportedOrder { order: usize, max: usize },
    /// A per-point coefficient was requested at an index with no sample.
    InvalidIndex { index: usize, len: usize },
    /// Model family not handled by the requested operation.
    UnsupportedModel(&'static str),
    /// Covariance matrix failed to factorize even at the jitter cap.
    AssemblyDegenerate { jitter_cap: f64 },
    /// Every training restart diverged; carries per-restart final objectives.
    TrainingFailed(alloc::vec::Vec<f64>),
    /// Malformed input that is not a dimension issue (empty sets, NaNs, ...).
    InvalidInput(&'static str),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            CoreError::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
            CoreError::UnsupportedOrder { order, max } => {
                write!(f, "derivative order {order} exceeds supported maximum {max}")
            }
            CoreError::InvalidIndex { index, len } => {
                write!(f, "coefficient index {index} out of range for {len} samples")
            }
            CoreError::UnsupportedModel(family) => write!(f, "unsupported model family: {family}"),
            CoreError::AssemblyDegenerate { jitter_cap } => {
                write!(f, "covariance not positive definite at jitter cap {jitter_cap:e}")
            }
            CoreError::TrainingFailed(finals) => {
                write!(f, "all {} restarts diverged", finals.len())
            }
            CoreError::InvalidInput(what) => write!(f, "invalid input: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}
