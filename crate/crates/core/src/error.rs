use alloc::string::String;

/// Errors raised by the decomposition and reconstruction pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("table range [{table_min}, {table_max}] keV does not cover grid range [{grid_min}, {grid_max}] keV")]
    Range {
        table_min: f64,
        table_max: f64,
        grid_min: f64,
        grid_max: f64,
    },
    #[error("invalid value: {0}")]
    Validation(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("ill-conditioned least-squares system (condition number {condition:.3e})")]
    Conditioning { condition: f64 },
    #[error("numerical divergence: {0}")]
    Divergence(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
