use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {block}: expected {expected}, got {got}")]
    Dimension { block: &'static str, expected: usize, got: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("underdetermined: {0}")]
    Underdetermined(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        trace: Vec<crate::fitting::LossRecord>,
    },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(block: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { block, expected, got }
    }

    /// True for failures caused by the numbers themselves rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NonFinite { .. })
    }
}
