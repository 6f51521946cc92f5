//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum.
///
/// Variants are grouped by *what went wrong*, not by which module raised
/// them, so callers (in particular the CLI) can map them onto a small set
/// of outcomes: usage problems, bad input data, and numerical divergence.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible dimensions.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A byte stream did not decode as the expected file format.
    #[error("format error: {0}")]
    Format(String),

    /// Structurally valid input whose pieces disagree with each other
    /// (e.g. an image file and a label file with different sample counts).
    #[error("inconsistent input: {0}")]
    Consistency(String),

    /// A numeric argument fell outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration file or option set failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or non-finite parameters.
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss or parameters")]
    Diverged { epoch: usize, batch: usize },

    /// An exact-enumeration routine was asked for more work than the
    /// caller-visible cost guard allows.
    #[error("cost guard: {0}")]
    CostGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for the common two-shape mismatch report.
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
