use std::path::PathBuf;

use crate::prior::Label;

pub type Result<T> = std::result::Result<T, Error>;

/// Problems with the on-disk token-grid or bank formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"PANC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes after payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("row {row} has L2 norm {norm}, too far from unit length to correct")]
    NormDeviation { row: usize, norm: f64 },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("row {row} has (near-)zero norm and cannot be normalized")]
    DegenerateVector { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("no entries carry the {0} label")]
    MissingLabel(Label),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vertex {0} has zero degree")]
    IsolatedVertex(usize),

    #[error("eigensolver did not converge after {iterations} iterations (last residual {last:e})")]
    Convergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("matrix of size {size} exceeds the dense solver limit {limit}")]
    SizeGuardrail { size: usize, limit: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Strips any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_convergence(&self) -> bool {
        matches!(self.root(), Error::Convergence { .. })
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
