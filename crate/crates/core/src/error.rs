use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("graph contains a directed cycle")]
    Cycle,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("infeasible ordering constraints: {0}")]
    Infeasible(String),

    #[error("solver did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at outer iteration {iteration}: objective is {value}")]
    Diverged { iteration: usize, value: f64 },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension",
            Error::Cycle => "cycle",
            Error::InvalidParameter(_) | Error::OutOfRange(_) => "invalid-argument",
            Error::Infeasible(_) => "infeasible",
            Error::NonConvergence { .. } => "non-convergence",
            Error::NonFinite(_) | Error::Diverged { .. } => "numerical",
            Error::InvalidData(_) | Error::Parse { .. } => "invalid-input",
            Error::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "invalid-argument" => 2,
            "invalid-input" => 3,
            "dimension" => 4,
            "cycle" | "infeasible" => 5,
            "numerical" | "non-convergence" => 6,
            _ => 1,
        }
    }
}
