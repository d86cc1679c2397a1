use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("could not place building {index} without overlap after {attempts} attempts")]
    Placement { index: usize, attempts: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("registration diverged: {0}")]
    Divergence(String),

    #[error("{0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }
}
