use thiserror::Error;

pub type Result<T, E = TspError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TspError {
    #[error("an instance needs at least one city")]
    EmptyInstance,
    #[error("coordinate of city {index} is not finite")]
    NonFiniteCoordinate { index: usize },
    #[error("not a permutation: {0}")]
    NotPermutation(String),
    #[error("city {index} out of range for {n} cities")]
    CityOutOfRange { index: usize, n: usize },
    #[error("{n} cities is too many for exhaustive search (max {max})")]
    TooLarge { n: usize, max: usize },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
