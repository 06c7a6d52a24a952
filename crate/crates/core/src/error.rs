use std::time::Duration;

use crate::solver::ReconResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shift ({dx}, {dy}) exceeds master mask margin {margin}")]
    ShiftOutOfBounds { dx: i64, dy: i64, margin: usize },

    #[error("dense operator too large: {rows}x{cols} (limit n <= {limit})")]
    TooLarge { rows: usize, cols: usize, limit: usize },

    #[error("calibration degenerate: {guarded} of {total} pixels below illumination guard (allowed {allowed})")]
    CalibrationDegenerate {
        guarded: usize,
        total: usize,
        allowed: usize,
    },

    #[error("plugin did not answer within {0:?}")]
    PluginTimeout(Duration),

    #[error("plugin protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("plugin reported an error: {0}")]
    PluginError(String),

    #[error("plugin transport failure: {context}: {source}")]
    PluginIo {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("solver aborted at iteration {iteration}: {source}")]
    SolverAborted {
        iteration: usize,
        partial: Box<ReconResult>,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient frames: need {needed}, found {found}")]
    InsufficientFrames { needed: usize, found: usize },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("image decode failed for {path}: {message}")]
    Image { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
