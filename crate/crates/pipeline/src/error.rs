use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] photovol::Error),
    #[error("missing product {product}: {hint}")]
    Missing { product: String, hint: String },
    #[error("stale product {product}: {reason}")]
    Stale { product: String, reason: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid annotation: {0}")]
    Annotation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        PipelineError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn missing(product: impl Into<String>, hint: impl Into<String>) -> Self {
        PipelineError::Missing {
            product: product.into(),
            hint: hint.into(),
        }
    }

    /// Process exit status: 3 for numerical failures, 2 for everything a
    /// user can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Core(e) if !e.is_validation() => 3,
            _ => 2,
        }
    }

    /// Short machine-readable code for the HTTP service.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Core(photovol::Error::AmbiguousSeed(_)) => "ambiguous_seed",
            PipelineError::Core(photovol::Error::DegenerateLandmarks(_)) => "degenerate_landmarks",
            PipelineError::Core(photovol::Error::EmptyMask(_)) => "empty_mask",
            PipelineError::Core(photovol::Error::Numerical(_)) => "numerical_failure",
            PipelineError::Core(_) => "invalid_input",
            PipelineError::Missing { .. } => "missing_product",
            PipelineError::Stale { .. } => "stale_product",
            PipelineError::Unsupported(_) => "unsupported_format",
            PipelineError::Format { .. } => "malformed_file",
            PipelineError::Config(_) => "config",
            PipelineError::Annotation(_) => "invalid_annotation",
            PipelineError::Io { .. } => "io",
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}
