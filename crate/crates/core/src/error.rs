use thiserror::Error;

use crate::memory::ObjectId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid time interval [{start}, {end}]")]
    InvalidInterval { start: u64, end: u64 },

    #[error("invalid response track: {0}")]
    InvalidTrack(String),

    #[error("unknown object id {0}")]
    UnknownObject(ObjectId),

    #[error("object id {0} already present in memory")]
    IdCollision(ObjectId),

    #[error("out-of-order timestamp: got t={got}, expected {expected}")]
    Ordering { got: u64, expected: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tracker contract violated: {0}")]
    TrackerContract(String),

    #[error("invariant audit failed: {0}")]
    Audit(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serialization(err.to_string())
    }
}

impl From<bincode::Error> for Error {
    fn from(err: bincode::Error) -> Self {
        Error::Serialization(err.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(err: toml::de::Error) -> Self {
        Error::Config(err.to_string())
    }
}
