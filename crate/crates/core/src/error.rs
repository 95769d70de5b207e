use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prompt template `{id}`: {reason}")]
    Template { id: String, reason: String },

    #[error("catalog category `{category}`: {reason}")]
    Catalog { category: String, reason: String },

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("empty attribute pool for category `{0}`")]
    EmptyPool(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
