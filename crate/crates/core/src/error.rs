use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file contains no sequences")]
    EmptyFile { path: PathBuf },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("row {row} of {what} is zero; normalization undefined")]
    ZeroRow { what: &'static str, row: usize },

    #[error("not a stochastic {what}: {reason}")]
    NotStochastic { what: &'static str, reason: String },

    #[error("sequence is impossible under the model at position {position}")]
    ImpossibleSequence { position: usize },

    #[error("sequence {sequence} is impossible under the model at position {position}")]
    ImpossibleDatasetSequence { sequence: usize, position: usize },

    #[error("power iteration did not converge after {iterations} iterations (last update {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("initial distribution is not stationary for A (residual {residual:e})")]
    NotStationary { residual: f64 },

    #[error("enumeration guard exceeded: {paths} hidden paths")]
    TooManyPaths { paths: f64 },

    #[error("dataset has no adjacent symbol pairs")]
    NoPairs,

    #[error("merging would absorb every symbol into the residual")]
    MergeAll,
}

impl Error {
    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::ImpossibleSequence { .. }
                | Error::ImpossibleDatasetSequence { .. }
                | Error::NoConvergence { .. }
                | Error::NotStationary { .. }
                | Error::ZeroRow { .. }
        )
    }

    /// True for errors in reading or interpreting data files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::EmptyFile { .. } | Error::Parse { .. } | Error::NoPairs | Error::MergeAll
        )
    }
}
