use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,

    #[error("zero extent: all points coincide")]
    ZeroExtent,

    #[error("unsupported dimension {0} (expected 2 or 3)")]
    UnsupportedDim(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("shape mismatch: expected {expected} points, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bounding box half extent {half_extent} does not enclose the cloud (max |coord| = {max_abs})")]
    BoxTooSmall { half_extent: f64, max_abs: f64 },

    #[error("non-finite kernel value for row {row}, point {point}")]
    NonFiniteKernel { row: usize, point: usize },

    #[error("linear solve failed (condition estimate {condition_estimate:.3e})")]
    SolveFailed { condition_estimate: f64 },

    #[error(
        "linear solve residual {residual:.3e} above tolerance (condition estimate {condition_estimate:.3e})"
    )]
    ResidualTooLarge {
        residual: f64,
        condition_estimate: f64,
    },

    #[error("system matrix is not numerically positive definite; gradient is not certified")]
    NotPositiveDefinite,

    #[error("zero-length normals at indices {0:?}")]
    ZeroNormal(Vec<usize>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteKernel { .. }
                | Error::SolveFailed { .. }
                | Error::ResidualTooLarge { .. }
                | Error::NotPositiveDefinite
        )
    }
}
