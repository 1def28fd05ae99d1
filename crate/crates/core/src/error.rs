use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HsidError>;

#[derive(Debug, Error)]
pub enum HsidError {
    /// A tensor or cube dimension did not match what the operation expects.
    #[error("shape mismatch in {context}: {dimension} expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        dimension: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cube values outside the normalized range: found {value} (allowed [{low}, {high}])")]
    NotNormalized { value: f64, low: f64, high: f64 },

    #[error("adjacent band count K={k} must be smaller than the number of bands B={bands}")]
    TooFewBands { k: usize, bands: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("non-finite gradient at iteration {iteration} in {tensor}")]
    NonFiniteGradient { iteration: u64, tensor: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),

    #[error("missing required setting {0:?}")]
    MissingSetting(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HsidError {
    pub(crate) fn shape(
        context: impl Into<String>,
        dimension: &'static str,
        expected: usize,
        actual: usize,
    ) -> Self {
        HsidError::ShapeMismatch {
            context: context.into(),
            dimension,
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HsidError::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from user input (bad files, configs, arguments)
    /// rather than an internal failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            HsidError::NonFiniteLoss { .. } | HsidError::NonFiniteGradient { .. }
        )
    }
}
