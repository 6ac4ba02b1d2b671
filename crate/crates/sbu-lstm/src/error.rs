//! Error types for configuration, data, and persistence failures.
//!
//! Shape mismatches inside the numeric kernels are programmer errors and
//! panic with a message naming both shapes; everything recoverable goes
//! through [`Error`].

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An invalid configuration value or model spec.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (CSV parse failures carry a line number).
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Checkpoint load/save failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged to a non-finite loss.
    #[error(
        "training aborted: non-finite loss at epoch {epoch}, batch {batch}; \
         try a smaller learning rate"
    )]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// A metric is undefined for the given inputs (e.g. empty, all-zero actuals).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Prediction requested at a masked final timestep.
    #[error("prediction undefined: the last input timestep is missing")]
    LastStepMasked,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
