use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("site `{0}` appears more than once")]
    DuplicateSite(String),

    #[error("unknown site `{0}`")]
    UnknownSite(String),

    #[error("registers differ")]
    RegisterMismatch,

    #[error("index {index} out of range 1..={dim} at site `{site}`")]
    IndexOutOfRange { site: String, index: usize, dim: usize },

    #[error("state has zero norm")]
    ZeroNorm,

    #[error("site dimension {dim} is not {d}^2")]
    NotPerfectSquare { dim: usize, d: usize },

    #[error("site `{0}` is entangled with the rest of the state")]
    NotProductSite(String),

    #[error("perfect matchings need an even number of nodes, got {0}")]
    OddNodeCount(usize),

    #[error("quantum random graph is not materialized")]
    NotMaterialized,

    #[error("measurement set is incomplete (deviation {0:e})")]
    Incomplete(f64),

    #[error("instance too large for exact simulation: {0}")]
    TooLarge(String),

    #[error("critical exponent undefined for a pattern without edges")]
    ThresholdUndefined,
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
