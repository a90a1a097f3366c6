use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("tile out of bounds")]
    OutOfBounds,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("iteration did not converge: {0}")]
    Divergence(String),
    #[error("unobservable: {0}")]
    Unobservable(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
