use nalgebra::DMatrix;
use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A point or set fell outside the domain it must lie in.
    #[error("domain error: {0}")]
    Domain(String),

    /// Incompatible dimensions (e.g. a square-matrix operation on m != n).
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violated a precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An iterative minimization stopped before reaching its tolerance.
    /// Carries the last iterate and its gradient norm for diagnosis.
    #[error("solver error: {message} (gradient norm {gradient_norm:.3e} after {iterations} iterations)")]
    Solver {
        message: String,
        last_iterate: DMatrix<f64>,
        gradient_norm: f64,
        iterations: usize,
    },

    /// Detected null-space structure was internally inconsistent.
    #[error("structure error: {0}")]
    Structure(String),

    /// The reference cell cannot tile space (e.g. balls).
    #[error("unsupported tessellation: {0}")]
    UnsupportedTessellation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
