use std::path::PathBuf;

/// Errors produced by tensor kernels, model assembly, data handling and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown layer path: {0}")]
    UnknownLayer(String),
    #[error("checkpoint is missing tensor key: {0}")]
    MissingKey(String),
    #[error("checkpoint payload disagrees with its header manifest: {0}")]
    ManifestMismatch(String),
    #[error("bad magic bytes in tensor file (expected `MERA`)")]
    BadMagic,
    #[error("unsupported tensor file format version {0}")]
    VersionMismatch(u32),
    #[error("truncated tensor file: {0}")]
    Truncated(String),
    #[error("malformed PPM/PGM image: {0}")]
    BadImage(String),
    #[error("malformed dataset manifest: {0}")]
    BadManifest(String),
    #[error("class {0:?} has too few samples to stratify")]
    TooFewSamples(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: training diverged")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
