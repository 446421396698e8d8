use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {op}")]
    InvalidShape { op: &'static str, shape: Vec<usize> },

    #[error("{op}: input {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward from an untracked tensor")]
    Untracked,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("CTC target of length {labels} ({repeats} adjacent repeats) cannot be aligned to {frames} frames")]
    InfeasibleTarget {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("label {label} outside vocabulary 1..={vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },

    #[error("enumeration of {0} alignments exceeds the brute-force limit")]
    EnumerationTooLarge(u128),

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("not a strictly positive probability distribution: {0}")]
    NotDistribution(String),

    #[error("decoder is disabled; set alpha = 1 to train on the CTC loss alone")]
    DecoderDisabled,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown preset `{name}`; available presets: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("checksum mismatch for {path}: manifest says {expected}, file hashes to {actual}")]
    Checksum {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn corrupt(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
