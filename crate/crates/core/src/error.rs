use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid weight model: {0}")]
    InvalidModel(String),

    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    #[error("q = {q} lies outside the interval J = ({lo}, {hi})")]
    OutsideJ { q: f64, lo: f64, hi: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("word of length {len} over base {base} does not fit in a 64-bit index")]
    WordTooLong { base: u32, len: u32 },

    #[error("resource budget exceeded: {needed} nodes requested, budget is {budget}")]
    Budget { needed: u128, budget: u128 },

    #[error("{count} truncated masses are non-positive (finite-depth artifact)")]
    NonPositiveMass { count: usize },

    #[error("non-finite weight encountered at node (depth {depth}, index {index})")]
    NonFiniteWeight { depth: u32, index: u64 },

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
