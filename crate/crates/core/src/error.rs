use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient classes: need at least {needed} speakers, found {found}")]
    InsufficientClasses { needed: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite or invalid numeric value: {0}")]
    Numeric(String),

    #[error("matrix is singular or not positive definite (eigenvalue {eigenvalue:e}): {context}")]
    Singular { eigenvalue: f64, context: String },

    #[error("degenerate vector for utterance '{utt_id}': zero norm after centering")]
    DegenerateVector { utt_id: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible sampling plan: cell '{cell}' needs {needed} utterances, has {available}")]
    InfeasiblePlan {
        cell: String,
        needed: usize,
        available: usize,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{count} referenced item(s) missing from the joined input, first: {}", .missing.join(", "))]
    Join { count: usize, missing: Vec<String> },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn singular(eigenvalue: f64, context: impl Into<String>) -> Self {
        Error::Singular {
            eigenvalue,
            context: context.into(),
        }
    }

    /// True for failures of the numerical routines themselves (as opposed to
    /// malformed input data or configuration).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Singular { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
