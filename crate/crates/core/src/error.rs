use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApexError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ApexError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::ApexError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
