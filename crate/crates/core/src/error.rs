use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScptError {
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("waveform too short: {0} samples (need at least 2)")]
    TooShort(usize),
    #[error("no frequency rows in band [{lo}, {hi}] Hz")]
    EmptyBand { lo: f64, hi: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty frame clip")]
    EmptyClip,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("subspace rank {rank} outside [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("label {label} outside [0, {classes})")]
    InvalidLabel { label: usize, classes: usize },
    #[error("clip of {clip_s} s longer than trial of {trial_s} s")]
    ClipTooLong { clip_s: f64, trial_s: f64 },
    #[error("need at least 3 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("all singular values are zero")]
    AllZero,
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ScptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScptError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScptError::InvalidArgument(_) => 1,
            ScptError::NonFinite(_) | ScptError::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        ScptError::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, ScptError>;
