//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter combination violates a documented invariant.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Threshold calibration found no separation between the two bit values,
    /// i.e. the configured cost model makes the channel degenerate.
    #[error("channel calibration failed: mean(m=0) == mean(m=1) == {0} cycles")]
    DegenerateChannel(f64),

    /// Probe phase could not identify a unique outlier set.
    #[error("probe is ambiguous: no unique outlier above the margin")]
    AmbiguousProbe,

    /// Trace operands must have equal lengths.
    #[error("trace length mismatch: {0} vs {1}")]
    TraceLengthMismatch(usize, usize),

    /// Configuration file problems (unknown key, bad value, bad syntax).
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
