use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage that can fail during ROI extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiStage {
    LeftEdge,
    RightEdge,
    Ridge,
}

impl std::fmt::Display for RoiStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RoiStage::LeftEdge => "left jaw-angle edge",
            RoiStage::RightEdge => "right jaw-angle edge",
            RoiStage::Ridge => "external oblique ridge",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("roi detection failed at {stage}: {reason}")]
    Roi { stage: RoiStage, reason: String },

    #[error("tooth isolation failed: {0}")]
    Isolation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure at epoch {epoch}, batch {batch} (lr {lr:e}): {reason}")]
    Numeric {
        epoch: usize,
        batch: usize,
        lr: f64,
        reason: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed container {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
