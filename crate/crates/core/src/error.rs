use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("state error: {0}")]
    State(String),
    #[error("build error at layer {layer}: {msg}")]
    Build { layer: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("preprocessing error: {0}")]
    Preprocess(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}
macro_rules! state_err {
    ($($arg:tt)*) => { $crate::error::Error::State(format!($($arg)*)) };
}
pub(crate) use arg_err;
pub(crate) use shape_err;
pub(crate) use state_err;
