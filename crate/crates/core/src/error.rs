use std::path::PathBuf;

use snowkit_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {}: {detail}", path.display())]
    Decode { path: PathBuf, detail: String },
    #[error("cannot encode {}: {detail}", path.display())]
    Encode { path: PathBuf, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),
    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("architecture fingerprint {found:#018x} does not match expected {expected:#018x}")]
    FingerprintMismatch { found: u64, expected: u64 },
    #[error("weights do not fit the network: {0}")]
    WeightLayout(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
