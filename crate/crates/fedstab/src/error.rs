use thiserror::Error;

/// Crate-wide error type.
///
/// `Validation` covers rejected inputs and config mistakes (CLI exit code 2),
/// `NumericDivergence` covers non-finite parameters during training (exit
/// code 3), and `NumericalValidation` covers failed internal numerics such as
/// an eigensolve whose top eigenvalue drifts away from 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric divergence at round {round}, local step {step}, client {client}: {detail}")]
    NumericDivergence {
        round: usize,
        step: usize,
        client: usize,
        detail: String,
    },

    #[error("numerical validation failure: {0}")]
    NumericalValidation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit status for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::ConfigParse(_) => 2,
            Error::NumericDivergence { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
