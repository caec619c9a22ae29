use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },

    #[error("{path}: unsupported bit depth ({detail})")]
    UnsupportedBitDepth { path: PathBuf, detail: String },

    #[error("{path}: unsupported channel count ({detail})")]
    UnsupportedChannels { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {message}")]
    ShapeMismatch { op: &'static str, message: String },

    #[error("dimension {got} is not divisible by {divisor} ({context})")]
    Indivisible {
        got: usize,
        divisor: usize,
        context: &'static str,
    },

    #[error("stain matrix is singular (|det| = {det:e})")]
    SingularMatrix { det: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("synthetic layout infeasible: {0}")]
    Infeasible(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCategory {
    Usage,
    Data,
    Numeric,
}

impl ExitCategory {
    pub fn code(self) -> i32 {
        match self {
            ExitCategory::Usage => 1,
            ExitCategory::Data => 2,
            ExitCategory::Numeric => 3,
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ExitCategory {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ExitCategory::Usage,
            Error::SingularMatrix { .. } | Error::NonFinite(_) => ExitCategory::Numeric,
            Error::Stage { source, .. } => source.category(),
            _ => ExitCategory::Data,
        }
    }
}
