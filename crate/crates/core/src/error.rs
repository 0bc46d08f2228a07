use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors from the on-disk container formats (`.npy`, PLY, PNG, JSON manifests).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unexpected shape: {0}")]
    Shape(String),
    #[error("file is truncated")]
    Truncated,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{}: {inner}", path.display())]
    InFile { path: PathBuf, inner: Box<FormatError> },
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Self::Io { .. } | Self::InFile { .. }) => e,
            e => Self::InFile { path: path.to_path_buf(), inner: Box::new(e) },
        }
    }

    /// The underlying error with any file context stripped.
    pub fn root(&self) -> &FormatError {
        match self {
            Self::InFile { inner, .. } => inner.root(),
            e => e,
        }
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Parse(e.to_string()).in_file(path))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FormatError::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| FormatError::io(path, e))
}
