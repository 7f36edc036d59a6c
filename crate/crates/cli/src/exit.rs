//! Process exit codes.

use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;
pub const EXIT_ASSERTION: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad config, flags or input data.
    Validation(String),
    /// Backend unreachable or misbehaving.
    Transport(String),
    /// A check the command exists to run did not hold (e.g. a gradient mismatch).
    Assertion(String),
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Transport(_) => EXIT_TRANSPORT,
            CliError::Assertion(_) => EXIT_ASSERTION,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Transport(m) => write!(f, "backend failure: {m}"),
            CliError::Assertion(m) => write!(f, "check failed: {m}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<irm_core::Error> for CliError {
    fn from(e: irm_core::Error) -> Self {
        use irm_core::Error as E;
        match e {
            E::Transport { .. } | E::Protocol { .. } => CliError::Transport(e.to_string()),
            E::Validation(_) | E::Shape(_) | E::Parse(_) | E::Record { .. } | E::Json(_) => {
                CliError::Validation(e.to_string())
            }
            E::Io(_) => CliError::Other(anyhow::Error::new(e)),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}
