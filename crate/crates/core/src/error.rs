use std::path::PathBuf;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// A programming or numerical failure inside the library.
    Internal,
    /// The caller handed us a file or argument we cannot use.
    BadInput,
    /// Two artifacts that should describe the same model do not agree.
    Incompatible,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("header overruns file: declared {declared} bytes, {available} available")]
    HeaderOverrun { declared: u64, available: u64 },
    #[error("header JSON: {0}")]
    HeaderJson(String),
    #[error("tensor `{tensor}`: bad data offsets: {reason}")]
    BadOffsets { tensor: String, reason: String },
    #[error("tensor `{tensor}`: unsupported dtype {dtype}")]
    UnsupportedDtype { tensor: String, dtype: String },
    #[error("tensor `{tensor}`: {reason}")]
    BadTensor { tensor: String, reason: String },
    #[error("{op}: dimension mismatch, {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor `{name}`: shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("tensor `{0}` missing")]
    MissingTensor(String),
    #[error("tensor `{0}` not expected here")]
    UnexpectedTensor(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("malformed delta file: {0}")]
    BadDeltaFile(String),
    #[error("plane count must be at least 1")]
    ZeroPlanes,
    #[error("rank {rank} exceeds min dimension {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("SVD did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("calibration stream is empty")]
    EmptyCalibration,
    #[error("token file holds {have} tokens, need at least {need}")]
    ShortTokenFile { have: usize, need: usize },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("unknown delta id `{0}`")]
    UnknownDelta(String),
    #[error("delta id `{0}` already registered")]
    DuplicateDelta(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Io { .. }
            | HeaderOverrun { .. }
            | HeaderJson(_)
            | BadOffsets { .. }
            | UnsupportedDtype { .. }
            | BadTensor { .. }
            | InvalidConfig(_)
            | TokenOutOfRange { .. }
            | SequenceTooLong { .. }
            | BadDeltaFile(_)
            | ZeroPlanes
            | RankTooLarge { .. }
            | ZeroRank
            | EmptyCalibration
            | ShortTokenFile { .. }
            | UnknownDelta(_)
            | DuplicateDelta(_)
            | Invalid(_) => ErrorCategory::BadInput,
            DimensionMismatch { .. }
            | ShapeMismatch { .. }
            | MissingTensor(_)
            | UnexpectedTensor(_) => ErrorCategory::Incompatible,
            NoConvergence(_) | NonFinite(_) => ErrorCategory::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
