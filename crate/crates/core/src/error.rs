use alloc::string::String;

/// Errors raised by the alignment core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: u64, loss: f64 },
    /// A pair source backed by external storage failed.
    #[error("data source: {0}")]
    Source(String),
    #[error("index {index} out of range for {len} samples")]
    Index { index: usize, len: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(alloc::format!($($arg)*)) };
}
pub(crate) use param_err;
pub(crate) use shape_err;
