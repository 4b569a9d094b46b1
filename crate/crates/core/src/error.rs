use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid family: {0}")]
    InvalidFamily(String),
    #[error("log-generator derivatives are not defined at z = 0 for this family")]
    NonSmoothAtOrigin,
    #[error("moment integral {0} did not converge")]
    MomentDivergence(&'static str),
    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown symbol `{name}` at position {pos}")]
    UnknownSymbol { name: String, pos: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular information matrix ({0})")]
    SingularInformation(&'static str),
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("fits do not belong to the same model and data: {0}")]
    MismatchedFits(&'static str),
    #[error("degenerate hypothesis: nothing to test")]
    DegenerateHypothesis,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("csv ingestion failed at row {row}: {msg}")]
    Ingestion { row: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("too many non-convergent replicates: {failures} redraws for {requested} replicates")]
    TooManyFailures { failures: usize, requested: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
