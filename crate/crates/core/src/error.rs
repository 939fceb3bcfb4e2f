use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HfatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HfatError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("tape lifecycle: {0}")]
    Lifecycle(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HfatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HfatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        HfatError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 covers data and configuration problems, 3 numeric failures. Usage
    /// errors (1) never reach this type; they come from argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            HfatError::Numeric(_) => 3,
            _ => 2,
        }
    }
}
