use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("workflow graph contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("engine for model {model} has no free slot")]
    Capacity { model: usize },

    #[error("search space of {states} states exceeds the cap of {cap}")]
    SearchSpaceTooLarge { states: u128, cap: u64 },

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by malformed input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Cycle(_) | Error::Parse(_) | Error::SearchSpaceTooLarge { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
