use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid shape {0}x{1}x{2}: every extent must be at least 2")]
    InvalidShape(usize, usize, usize),

    #[error("expected {expected} values, got {actual}")]
    DataLength { expected: usize, actual: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected} channel(s), got {actual}")]
    Channels {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for axis of extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },

    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("label {0} does not occur in the reference map")]
    LabelAbsent(u16),

    #[error("empty mask for label {0}")]
    EmptyMask(u16),

    #[error("landmark count mismatch: {0} vs {1}")]
    LandmarkCount(usize, usize),

    #[error("{0}")]
    Unsatisfiable(String),

    #[error("fixed-point inversion did not converge (residual {residual:.3e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),
}
