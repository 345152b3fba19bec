use thiserror::Error;

use crate::model::AnchorId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown anchor {0}")]
    UnknownAnchor(AnchorId),

    #[error("underdetermined geometry: {have} distinct anchors, need at least {need}")]
    Underdetermined { have: usize, need: usize },

    #[error("objective is not finite")]
    NonFiniteObjective,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
