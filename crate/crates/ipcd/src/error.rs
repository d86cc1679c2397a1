use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = IpcdError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum IpcdError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] ipcd_core::Error),
}

impl IpcdError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Self::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        Self::Format { path: path.as_ref().to_path_buf(), message: message.into() }
    }

    /// Process exit code: 1 for usage and configuration mistakes, 2 for
    /// everything the data or the numerics rejected.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Io { .. } | Self::Format { .. } | Self::Core(_) => 2,
        }
    }
}
