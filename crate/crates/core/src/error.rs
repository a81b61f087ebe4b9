use thiserror::Error;

/// Errors raised by the substrate, the oracle and the attack loops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("query budget exhausted: used {used} of {budget}, batch of {requested} rejected")]
    BudgetExhausted {
        used: u64,
        budget: u64,
        requested: u64,
    },

    #[error("query input out of range [-1, 1]: row {row}, column {col}, value {value}")]
    OutOfRange { row: usize, col: usize, value: f64 },

    #[error("target did not converge: test accuracy {accuracy:.4} below floor {floor:.4}")]
    TargetNotConverged { accuracy: f64, floor: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self, Error::BudgetExhausted { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
