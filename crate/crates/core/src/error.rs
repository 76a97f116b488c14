use thiserror::Error;

pub type Result<T, E = GhnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GhnError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("graph error: {message}")]
    Graph { message: String, cycle: Vec<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("optimizer error: non-finite gradient for parameter `{param}`")]
    Optimizer { param: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("training error: {message}; graph: {graph}")]
    Training { message: String, graph: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GhnError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        GhnError::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        GhnError::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        GhnError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GhnError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, GhnError::Config(_) | GhnError::Input(_))
    }
}
