use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("k = {k} out of range for a vector of length {len}")]
    KOutOfRange { k: usize, len: usize },

    #[error("covariance matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("covariance matrix must have unit diagonal (entry {index} is {value})")]
    NonUnitDiagonal { index: usize, value: f64 },

    #[error("covariance matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("factorization failed: relative reconstruction error {residual:e} exceeds tolerance")]
    Factorization { residual: f64 },

    #[error("combinatorial cap exceeded: {what} needs {count} subsets (cap {cap})")]
    CapExceeded { what: &'static str, count: f64, cap: f64 },

    #[error("grid does not satisfy requirements: {0}")]
    Grid(String),

    #[error("insufficient draws: bin {bin} holds {count} draws (minimum {min})")]
    SparseBin { bin: usize, count: u64, min: u64 },

    #[error("non-finite input value at index {0}")]
    NonFinite(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario `{id}`: {source}")]
    Scenario {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
