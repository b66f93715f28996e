use std::path::PathBuf;

use medrek_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: field `{field}` {message}")]
    InvalidField {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("empty text")]
    EmptyText,

    #[error("{what}: dimension mismatch, expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("expected a {expected} representation, got {got}")]
    RoleMismatch { expected: &'static str, got: &'static str },

    #[error("sequence of length {len} exceeds the model limit of {max}")]
    Overlength { len: usize, max: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated container")]
    Truncated,

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("language model did not converge: answer loss {loss:.4} after {epochs} epochs")]
    NonConvergence { loss: f64, epochs: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch size {batch} is larger than the split ({available} records)")]
    BatchTooLarge { batch: usize, available: usize },

    #[error("vocabulary too small: {0}")]
    VocabularyTooSmall(String),

    #[error("positive candidate is not in the candidate set")]
    PositiveNotInCandidates,

    #[error("sequence of length {len} is too short (need at least {min} tokens)")]
    TooShort { len: usize, min: usize },

    #[error("zero-norm vector at index {0}")]
    ZeroNorm(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Training or optimisation failed numerically rather than on input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NonFiniteLoss { .. } | Error::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
