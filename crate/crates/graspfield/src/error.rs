use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("point has non-positive depth in camera frame (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scene is empty")]
    EmptyScene,

    #[error("could not place object {object} after {attempts} attempts")]
    PlacementFailed { object: String, attempts: usize },

    #[error("unknown object set `{0}`")]
    UnknownObjectSet(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checkpoint is inconsistent: {0}")]
    BadCheckpoint(String),

    #[error("dataset error: {0}")]
    BadDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("png: {0}")]
    PngDecode(#[from] png::DecodingError),
}

impl Error {
    /// Whether the error is a configuration/usage problem (CLI exit 2)
    /// rather than a runtime failure (exit 1).
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::UnknownObjectSet(_) | Error::VersionMismatch { .. }
        )
    }
}
