use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// An argument is outside the domain of the operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Model, sparsification or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed fixture, archive or manifest contents.
    #[error("data error: {0}")]
    Data(String),

    /// A documented precondition on numeric inputs does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Wall-clock measurement could not be taken or was inconsistent.
    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
