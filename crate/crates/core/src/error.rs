use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite matrix")]
    NonFiniteMatrix,
    #[error("singular system (pivot {pivot})")]
    Singular { pivot: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("divergence at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("linear-solve divergence at iteration {iteration} (step {step})")]
    LinearSolveDivergence { iteration: usize, step: f64 },
    #[error("CG breakdown at iteration {iteration}")]
    Breakdown { iteration: usize },
    #[error("ITD requires full trajectory")]
    TrajectoryNotRecorded,
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}
