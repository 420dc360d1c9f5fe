use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("episode finished: all {0} slots consumed")]
    EpisodeFinished(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint integrity error at byte {offset}: {what}")]
    Integrity { offset: u64, what: String },

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("schema mismatch in column `{column}`: {what}")]
    Schema { column: String, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
