//! Error taxonomy shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both operands.
    #[error("shape mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// Invalid hyperparameter or model configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("bad data: {0}")]
    Data(String),

    /// API misuse, e.g. backward on a consumed tape or a non-scalar node.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Metric computation over an empty or unusable record set.
    #[error("metric error: {0}")]
    Metric(String),

    /// Input degenerates the operation, e.g. attribution over zero real tokens.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training produced a non-finite loss or gradient; carries diagnostics.
    #[error(
        "non-finite {what} at epoch {epoch}, batch {batch} \
         (classify loss {classify_loss}, calib loss {calib_loss})"
    )]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        classify_loss: f64,
        calib_loss: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
