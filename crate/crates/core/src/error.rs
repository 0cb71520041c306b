use thiserror::Error;

/// Errors raised across estimation, ingestion and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("missingness violation at line {line}: {message}")]
    Missingness { line: usize, message: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("logistic fit did not converge after {iterations} iterations (max |score| = {max_score:.3e})")]
    NonConvergence { iterations: usize, max_score: f64 },

    #[error("complete separation detected: max |coefficient| = {max_coef:.2} exceeds {threshold}")]
    Separation { max_coef: f64, threshold: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("infeasible two-phase design: {0}")]
    InfeasibleDesign(String),
}

pub type Result<T> = std::result::Result<T, Error>;
