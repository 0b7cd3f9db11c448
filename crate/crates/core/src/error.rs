use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The CLI maps these onto exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("invalid corpus weight: {0}")]
    InvalidCorpusWeight(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsegmentable word {0:?}")]
    Unsegmentable(String),
    #[error("marker collision in subword {0:?}")]
    MarkerCollision(String),
    #[error("dangling continuation at token {index} ({token:?})")]
    DanglingContinuation { index: usize, token: String },
    #[error("orphan continuation at token {index} ({token:?})")]
    OrphanContinuation { index: usize, token: String },

    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("vocab overflow: id {id} >= vocab size {vocab}")]
    VocabOverflow { id: usize, vocab: usize },
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("sequence too long: {len} > {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{path}:{line}: invalid UTF-8")]
    InvalidUtf8 { path: PathBuf, line: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("version mismatch in {path}: found {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("truncated record in {0}")]
    TruncatedRecord(PathBuf),
    #[error("trailing bytes after last record in {0}")]
    TrailingBytes(PathBuf),
    #[error("truncated file {0}")]
    Truncated(PathBuf),
    #[error("id out of range in {path}: {id} >= vocab size {vocab}")]
    IdOutOfRange { path: PathBuf, id: u32, vocab: u32 },

    #[error("config: {0}")]
    Config(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("model kind mismatch: expected {expected}, found {found}")]
    ModelKindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            InvalidArgument(_) | InvalidCorpusWeight(_) | Config(_) | ConfigMismatch(_)
            | ModelKindMismatch { .. } => 1,
            NonFinite(_) | NonFiniteGradient(_) | NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
