use thiserror::Error;

use crate::families::FamilyKind;

pub type Result<T> = std::result::Result<T, GmfmError>;

#[derive(Debug, Error)]
pub enum GmfmError {
    /// An observation lies outside the support of its likelihood family.
    #[error("value {x} is outside the support of the {family} family{}", fmt_cell(*.cell))]
    Domain {
        family: FamilyKind,
        x: f64,
        /// Zero-based (i, j, t) when the value came from a data set.
        cell: Option<(usize, usize, usize)>,
    },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("{matrix} is rank deficient (smallest singular value {smallest:.3e}); the model is not identified")]
    Identifiability { matrix: &'static str, smallest: f64 },

    #[error("singular {what} block {index} (condition number {condition:.3e})")]
    SingularBlock {
        what: &'static str,
        index: usize,
        condition: f64,
    },

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("malformed input in {source_name}: {message}")]
    Data {
        source_name: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_cell(cell: Option<(usize, usize, usize)>) -> String {
    match cell {
        Some((i, j, t)) => format!(" at cell (i={}, j={}, t={})", i + 1, j + 1, t + 1),
        None => String::new(),
    }
}

impl GmfmError {
    pub(crate) fn data(source_name: impl Into<String>, message: impl Into<String>) -> Self {
        GmfmError::Data {
            source_name: source_name.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, got: usize) -> Self {
        GmfmError::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    /// True for errors caused by the caller's data or configuration rather
    /// than by the numerics.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            GmfmError::Identifiability { .. }
                | GmfmError::SingularBlock { .. }
                | GmfmError::FitFailed(_)
        )
    }
}
