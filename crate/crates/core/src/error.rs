use thiserror::Error;

use crate::terrain::StoneId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no valid goal found after {0} attempts")]
    SamplingExhausted(usize),

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("stone {0} not found")]
    StoneNotFound(StoneId),

    #[error("degenerate stance: front and hind feet coincide")]
    DegenerateStance,

    #[error("stale plan: stone {0} has been removed")]
    StalePlan(StoneId),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("root stance has no legal actions")]
    DeadRoot,

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("foot {foot} has no reachable stone")]
    Stuck { foot: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}
