use thiserror::Error;

/// Errors raised by the identification pipeline and its building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(
        "Riccati iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    DareNotConverged { iterations: usize, residual: f64 },

    #[error("could not sample a valid system after {attempts} attempts")]
    SystemSampling { attempts: usize },

    #[error("regressor is rank deficient (condition number {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("non-positive residual degrees of freedom: j = {columns}, dof = {dof}")]
    NonPositiveDof { columns: usize, dof: i64 },

    #[error("singular weight matrix for the {scheme} scheme")]
    SingularWeight { scheme: &'static str },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("degenerate residues: posterior scale matrix not positive definite (min eigenvalue {min_eigenvalue:e})")]
    DegenerateResidues { min_eigenvalue: f64 },

    #[error("Gibbs chain diverged at iteration {iteration}")]
    ChainDiverged { iteration: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
