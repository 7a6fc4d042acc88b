use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank mismatch: expected rank {expected}, got {actual}")]
    RankMismatch { expected: usize, actual: usize },

    #[error("axis mismatch: {0}")]
    AxisMismatch(String),

    #[error("empty extent in shape {0:?}")]
    EmptyExtent(Vec<usize>),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    ConvergenceFailure { sweeps: usize, residual: f64 },

    #[error("bond mismatch between cores {left} and {right}: {left_bond} != {right_bond}")]
    BondMismatch {
        left: usize,
        right: usize,
        left_bond: usize,
        right_bond: usize,
    },

    #[error("invalid bond cap {0}; must be at least 1")]
    InvalidCap(usize),

    #[error("no shared central stored for {0}")]
    MissingCentral(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("invalid group count {groups} for {layers} layers")]
    InvalidGroupCount { layers: usize, groups: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vocabulary is empty")]
    EmptyVocab,

    #[error("vocabulary of {0} tokens is too small (need at least 4)")]
    VocabTooSmall(usize),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionUnsupported { found: u32, supported: u32 },

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
