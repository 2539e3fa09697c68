use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least one window of {window_len}")]
    InputTooShort { len: usize, window_len: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("missing noise-model context: variant {variant} requires {field}")]
    MissingContext { variant: &'static str, field: &'static str },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss} ({detail})")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        detail: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },

    #[error("zero-power {0} signal")]
    ZeroPower(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint role mismatch: expected {expected}, found {found}")]
    RoleMismatch { expected: &'static str, found: String },

    #[error("manifest {path}, line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
