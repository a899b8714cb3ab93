use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("ell must divide n (ell = {ell}, n = {n})")]
    EllDoesNotDivide { ell: usize, n: usize },

    #[error("non-finite entry at position {index}")]
    NonFinite { index: usize },

    #[error("enumeration budget exceeded: {what} = {value} > cap {cap}")]
    BudgetExceeded {
        what: &'static str,
        value: usize,
        cap: usize,
    },

    #[error("system has no ground-truth solution; the error metric needs x_star")]
    MissingGroundTruth,

    #[error("length mismatch between traces: {0} vs {1}")]
    TraceLengthMismatch(usize, usize),

    #[error("schema column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("too many malformed rows: {rejected} of {total} exceeds reject-rate cap {cap}")]
    RejectRate {
        rejected: usize,
        total: usize,
        cap: f64,
    },

    #[error("parse error in {source_name} line {line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or parameters, as opposed to
    /// failures of the environment (files, parsing of external data).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::InvalidParameter { .. }
                | Error::EllDoesNotDivide { .. }
                | Error::NonFinite { .. }
                | Error::BudgetExceeded { .. }
                | Error::MissingGroundTruth
                | Error::TraceLengthMismatch(..)
        )
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("p", format!("presence probability must lie in (0, 1], got {p}")))
    }
}
