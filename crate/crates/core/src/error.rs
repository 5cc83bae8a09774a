use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec `{name}`: {reason}")]
    InvalidModel { name: String, reason: String },

    #[error("invalid gpu spec `{name}`: {reason}")]
    InvalidGpu { name: String, reason: String },

    #[error("invalid deployment: {0}")]
    InvalidDeployment(String),

    #[error("invalid request {id}: {reason}")]
    InvalidRequest { id: u64, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("duplicate profile key (op={op}, phase={phase}, tokens={tokens}, context={context}) at line {line}")]
    DuplicateProfileKey {
        op: String,
        phase: String,
        tokens: u64,
        context: u64,
        line: usize,
    },

    #[error("insufficient profile data for op={op} phase={phase}: {reason}")]
    InsufficientProfileData {
        op: String,
        phase: String,
        reason: String,
    },

    #[error("config error in {path} at key `{key}`: {reason}")]
    Config {
        path: String,
        key: String,
        reason: String,
    },

    #[error("chunk index {index} out of range for plan with {len} chunks")]
    ChunkIndexOutOfRange { index: usize, len: usize },

    #[error("inconsistent timing: {0}")]
    InconsistentTiming(String),

    #[error("workload mismatch: baseline {baseline} vs candidate {candidate}")]
    WorkloadMismatch { baseline: String, candidate: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 for invariant failures, 2 for
    /// I/O and configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) | Error::InconsistentTiming(_) => 1,
            _ => 2,
        }
    }
}
