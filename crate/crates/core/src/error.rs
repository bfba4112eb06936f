use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsdaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    #[error("image {height}x{width} is smaller than the minimum {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("region {region} lies outside a {height}x{width} grid")]
    RegionOutOfBounds {
        region: String,
        height: usize,
        width: usize,
    },

    #[error("non-finite values after stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint config hash {found} does not match config hash {expected}")]
    HashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AsdaError>;
