use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("FASTA parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),

    #[error("invalid substitution parameters: {0}")]
    InvalidParams(String),

    #[error("invalid distribution parameters: {0}")]
    InvalidSpec(String),

    #[error("rate matrix violates detailed balance (max deviation {0:e})")]
    NonReversible(f64),

    #[error("{op} is undefined at {value}")]
    Domain { op: &'static str, value: f64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite ELBO at iteration {iteration}")]
    NonFinite { iteration: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
