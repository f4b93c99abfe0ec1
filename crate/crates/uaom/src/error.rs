use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] uaom_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Container {
        path: PathBuf,
        source: ContainerError,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// True for problems with the inputs or settings rather than the run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Container { .. } | Error::Image { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Core(uaom_core::Error::InvalidConfig(_)) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

/// Problems decoding a weight container.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("byte-length mismatch for {what}: expected {expected} bytes, found {found}")]
    ByteLength {
        what: String,
        expected: u64,
        found: u64,
    },
    #[error("missing tap {0}")]
    MissingTap(String),
    #[error("unknown dtype {dtype} for tensor {tensor}")]
    UnknownDtype { tensor: String, dtype: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid model: {0}")]
    Model(uaom_core::Error),
    #[error("self-check failed on {output}: max abs error {max_err} exceeds {tolerance}")]
    SelfCheck {
        output: String,
        max_err: f32,
        tolerance: f32,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
