use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("column `{0}` not found in dataset")]
    MissingColumn(String),

    #[error("column `{name}` has type {found}, expected {expected}")]
    ColumnType {
        name: String,
        expected: &'static str,
        found: &'static str,
    },

    #[error("column `{name}` has {len} rows, dataset has {rows}")]
    RaggedColumn { name: String, len: usize, rows: usize },

    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),

    #[error("specification needs at least one covariate or fixed effect")]
    EmptyDesign,

    #[error("PPML response must be nonnegative (row {row}: {value})")]
    NegativeResponse { row: usize, value: f64 },

    #[error("non-finite value in column `{name}` at row {row}")]
    NonFinite { name: String, row: usize },

    #[error("no usable observations after dropping separated groups")]
    NoObservations,

    #[error("IRLS did not converge after {iterations} iterations (last deviance change {change:e}); possible perfect separation")]
    NoConvergence { iterations: usize, change: f64 },

    #[error("design matrix is singular after dropping collinear covariates")]
    Singular,

    #[error("level `{level}` of fixed effect `{dim}` was not seen during estimation")]
    UnknownLevel { dim: String, level: String },

    #[error("unknown term `{0}`")]
    UnknownTerm(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed dataset: {0}")]
    Malformed(String),

    #[error("estimation of {what}: {reason}")]
    Elasticity { what: &'static str, reason: String },

    #[error("iteration oscillates; last iterates {iterates:?}")]
    Oscillation { iterates: Vec<f64> },

    #[error("callback failed: {0}")]
    Callback(String),
}

pub type Result<T> = std::result::Result<T, EstimationError>;
