use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Dimensions, row counts or ID lists of two inputs disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A row that must be normalized has (near) zero norm.
    #[error("cannot normalize row {row}: zero norm")]
    ZeroRow { row: usize },
    /// Non-finite values, duplicate IDs, unknown labels and similar.
    #[error("invalid data: {0}")]
    Data(String),
    /// A hyperparameter violates its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// Numerical failure (rank deficiency, degenerate system).
    #[error("numerical error: {0}")]
    Numeric(String),
}
