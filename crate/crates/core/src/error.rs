use thiserror::Error;

#[derive(Debug, Error)]
pub enum CcdmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: {what} (produce it with `ccdm {producer}`)")]
    MissingDependency { what: String, producer: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

pub type Result<T> = std::result::Result<T, CcdmError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CcdmError::InvalidArgument(msg.into()))
}
