use std::process::ExitCode;

use medrek_core::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Usage = 2,
    Io = 3,
    Validation = 4,
    Numeric = 5,
}

#[derive(Debug, thiserror::Error)]
#[error("{source:#}")]
pub struct CliError {
    pub kind: Failure,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(kind: Failure, source: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            source: source.into(),
        }
    }

    pub fn code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

pub fn classify(e: &Error) -> Failure {
    match e {
        Error::Io { .. } => Failure::Io,
        e if e.is_numeric() => Failure::Numeric,
        _ => Failure::Validation,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(classify(&e), e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn validation(msg: impl std::fmt::Display) -> CliError {
    CliError::new(Failure::Validation, anyhow::anyhow!("{msg}"))
}

pub fn io(msg: impl std::fmt::Display) -> CliError {
    CliError::new(Failure::Io, anyhow::anyhow!("{msg}"))
}
