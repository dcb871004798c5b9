use std::path::PathBuf;

use crate::stability::Spectrum;

/// Errors raised by the epiflow core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("region `{0}` from the registry is absent from the input")]
    MissingRegion(String),

    #[error("region `{0}` is not part of the configured registry")]
    UnknownRegion(String),

    #[error("region `{region}` has no row for {date}")]
    GapInSeries { region: String, date: chrono::NaiveDate },

    #[error("negative total on line {line}: {column} = {value}")]
    NegativeTotal { line: u64, column: String, value: f64 },

    #[error("unparseable row at line {line}: {reason}")]
    UnparseableRow { line: u64, reason: String },

    #[error("{what} out of range: {value} (valid {valid})")]
    OutOfRange {
        what: &'static str,
        value: i64,
        valid: String,
    },

    #[error("insufficient history at day {k}: the first usable day is {min_k}")]
    InsufficientHistory { k: usize, min_k: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("horizon {horizon} exceeds the lag depth {n_tau}")]
    HorizonTooLong { horizon: usize, n_tau: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("report is empty")]
    EmptyReport,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("root finder did not converge (max residual {})", .best.max_residual)]
    NonConvergence { best: Box<Spectrum> },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn out_of_range(what: &'static str, value: usize, lo: usize, hi: usize) -> Self {
        Error::OutOfRange {
            what,
            value: value as i64,
            valid: format!("{lo}..={hi}"),
        }
    }
}
