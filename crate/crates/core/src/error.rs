use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },
    #[error("degenerate signal: {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("external compressor unavailable: {0}")]
    CompressorMissing(String),
    #[error("external compressor failed: {0}")]
    CompressorFailed(String),
    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn config_err<T>(field: impl Into<String>, message: impl Into<String>) -> Result<T> {
    Err(Error::Config { field: field.into(), message: message.into() })
}
