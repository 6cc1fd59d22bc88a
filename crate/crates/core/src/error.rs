use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("transform is not invertible")]
    NonInvertible,
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("ambiguous seed: {0}")]
    AmbiguousSeed(String),
    #[error("degenerate overlap: reference lies entirely outside the stack grid")]
    DegenerateOverlap,
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures caused by bad inputs rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
