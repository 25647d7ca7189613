use std::io;

use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("step {step} out of range (valid {min}..={max})")]
    StepOutOfRange { step: usize, min: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown prompt id {id} (table has {rows} rows)")]
    UnknownPrompt { id: usize, rows: usize },
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("infeasible partition: {0}")]
    Infeasible(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("corrupt input: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code: 1 for configuration errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
