use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty session")]
    EmptySession,

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("missing pose log: {0}")]
    MissingPoseLog(PathBuf),

    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),

    #[error("corrupt frame file {path}: {reason}")]
    CorruptFrame { path: PathBuf, reason: String },

    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },

    #[error("inconsistent session: {0}")]
    Inconsistent(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("target placement infeasible: {0}")]
    PlacementInfeasible(String),

    #[error("segmenter requires prompts on its first frame")]
    MissingPrompts,

    #[error("prompt point ({x}, {y}) outside {width}x{height} frame")]
    PromptOutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("propagation lost at timestamps {0:?}")]
    PropagationLoss(Vec<u64>),

    #[error("missing mask for timestamp {0}")]
    MissingMask(u64),

    #[error("missing processed frame for timestamp {0}")]
    MissingProcessedFrame(u64),

    #[error("empty stream")]
    EmptyStream,

    #[error("stream not strictly increasing at index {0}")]
    UnsortedStream(usize),

    #[error("no session start marker")]
    NoStartMarker,

    #[error("sync violation: ego {ego_ns} paired with third {third_ns} exceeds {tolerance_ns} ns")]
    SyncViolation {
        ego_ns: u64,
        third_ns: u64,
        tolerance_ns: u64,
    },

    #[error("start timestamp {0} not covered by the pose log")]
    StartNotCovered(u64),

    #[error("marker detection: {0}")]
    MarkerDetection(String),

    #[error("{0} out of domain")]
    Domain(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("degenerate saliency: all-zero gradient")]
    ZeroSaliency,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, reason: impl std::fmt::Display) -> Self {
        Error::Malformed {
            what: what.into(),
            reason: reason.to_string(),
        }
    }
}
