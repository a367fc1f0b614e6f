use std::fmt;

use thiserror::Error;

/// Failure classes, mapped onto the process exit codes used by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular system in {context} (condition number {condition:.3e})")]
    SingularSystem { context: String, condition: f64 },

    #[error("moment function returned a non-finite value at coordinate {coordinate}")]
    NonFiniteMoment { coordinate: usize },

    #[error("likelihood maximisation stalled after {iterations} iterations (possible separation)")]
    Separation { iterations: usize },

    #[error("analytic and numeric Jacobians disagree (relative discrepancy {discrepancy:.3e})")]
    JacobianMismatch { discrepancy: f64 },

    #[error("propensity score fit did not converge in {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("treatment value {value} at row {row} is outside the {family} support")]
    SupportViolation {
        row: usize,
        value: f64,
        family: &'static str,
    },

    #[error("conditional treatment variance is numerically singular at row {row}")]
    DegenerateVariance { row: usize },

    #[error("control cell {cell} has {size} rows or a singular within-cell design")]
    CellTooSmall { cell: String, size: usize },

    #[error("density must be positive and finite on the grid (got {value} at x = {x})")]
    NegativeDensity { x: f64, value: f64 },

    #[error("{failed} of {reps} replicates failed for {estimator} (limit 1%)")]
    TooManyFailures {
        estimator: String,
        failed: usize,
        reps: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("column '{0}' not found in header")]
    MissingColumn(String),

    #[error("non-numeric cell '{value}' at row {row}, column '{column}'")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("dataset has no rows")]
    EmptyData,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::SingularSystem { .. } => "singular_system",
            Error::NonFiniteMoment { .. } => "non_finite_moment",
            Error::Separation { .. } => "separation",
            Error::NonConvergence { .. } => "non_convergence",
            Error::JacobianMismatch { .. } => "jacobian_mismatch",
            Error::SupportViolation { .. } => "support_violation",
            Error::DegenerateVariance { .. } => "degenerate_variance",
            Error::CellTooSmall { .. } => "cell_too_small",
            Error::NegativeDensity { .. } => "negative_density",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::InvalidInput(_) => "invalid_input",
            Error::Parse { .. } => "parse_error",
            Error::MissingColumn(_) => "missing_column",
            Error::NonNumericCell { .. } => "non_numeric_cell",
            Error::EmptyData => "empty_data",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::MissingColumn(_)
            | Error::NonNumericCell { .. }
            | Error::EmptyData
            | Error::SupportViolation { .. }
            | Error::Io(_) => ErrorClass::Data,
            _ => ErrorClass::Numerical,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    /// True for failures a Monte Carlo replicate may legitimately hit.
    pub fn is_numerical(&self) -> bool {
        self.class() == ErrorClass::Numerical
    }
}

pub type Result<T> = std::result::Result<T, Error>;
