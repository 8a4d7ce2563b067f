use std::fmt;
use std::path::PathBuf;

use marn_core::CoreError;

/// Errors surfaced by file formats, pipelines, and the CLI.
#[derive(Debug)]
pub enum MarnError {
    /// Structural problem with a file: bad magic, unsupported version,
    /// inconsistent header fields.
    Format { path: PathBuf, msg: String },
    /// Payload ends or breaks mid-stream; `offset` is the byte position.
    Corrupt {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    /// Digest chain mismatch between pipeline stages.
    Digest {
        what: String,
        expected: u64,
        actual: u64,
    },
    Io { path: PathBuf, source: std::io::Error },
    Json { path: PathBuf, source: serde_json::Error },
    Core(CoreError),
    Usage(String),
}

impl fmt::Display for MarnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarnError::Format { path, msg } => write!(f, "{}: {msg}", path.display()),
            MarnError::Corrupt { path, offset, msg } => {
                write!(f, "{}: corrupt at byte {offset}: {msg}", path.display())
            }
            MarnError::Digest {
                what,
                expected,
                actual,
            } => write!(
                f,
                "digest mismatch for {what}: expected {expected:016x}, found {actual:016x}"
            ),
            MarnError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            MarnError::Json { path, source } => write!(f, "{}: {source}", path.display()),
            MarnError::Core(e) => write!(f, "{e}"),
            MarnError::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for MarnError {}

impl From<CoreError> for MarnError {
    fn from(e: CoreError) -> Self {
        MarnError::Core(e)
    }
}

impl MarnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MarnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        MarnError::Json {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            MarnError::Usage(_) => 1,
            MarnError::Core(CoreError::Numeric(_)) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MarnError>;
