use std::path::PathBuf;

/// Error type shared across the toolkit.
///
/// Variants carry enough context to produce the CLI's single-line
/// `error:<code>:<message>` output; `exit_code` maps them onto the
/// usage-vs-data split.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("ground truth: {0}")]
    GroundTruth(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable code for CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "arg",
            Error::ShapeMismatch(_) => "shape",
            Error::ZeroVector => "zerovec",
            Error::Degenerate(_) => "degenerate",
            Error::Malformed { .. } => "malformed",
            Error::GroundTruth(_) => "groundtruth",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 1 for usage errors, 2 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
