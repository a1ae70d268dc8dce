use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants split into validation failures (bad shapes, bad config, bad
/// input files) and runtime failures (I/O, aborted training); the CLI maps
/// the former to exit code 1 and the latter to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("training aborted: {0}")]
    Aborted(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Config(_)
                | Error::Contract(_)
                | Error::Parse { .. }
                | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
