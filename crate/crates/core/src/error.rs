use std::path::PathBuf;

/// Errors produced by the pre-training and probing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A loss or activation became non-finite. Surfaces as exit code 3 in the CLI.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: i/o error: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: missing file", path.display())]
    MissingFile { path: PathBuf },

    #[error("{}: malformed manifest: {msg}", path.display())]
    MalformedManifest { path: PathBuf, msg: String },

    #[error("{}: manifest/content mismatch: {msg}", path.display())]
    ManifestMismatch { path: PathBuf, msg: String },

    #[error("{}: header/shape mismatch: {msg}", path.display())]
    HeaderMismatch { path: PathBuf, msg: String },

    #[error("{}: truncated data: {msg}", path.display())]
    Truncated { path: PathBuf, msg: String },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("{}: corrupt checkpoint: {msg}", path.display())]
    CorruptCheckpoint { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures caused by non-finite numbers rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
