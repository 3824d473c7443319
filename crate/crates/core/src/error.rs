use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("node `{node}`: expected {expected}, got {actual:?}")]
    ShapeMismatch {
        node: String,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("node `{node}`: invalid attribute: {message}")]
    Attr { node: String, message: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error{}: {message}", stage.map(|s| format!(" at stage {s}")).unwrap_or_default())]
    Config {
        stage: Option<usize>,
        message: String,
    },

    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("non-finite value first produced by node `{node}` ({kind})")]
    NonFinite { node: String, kind: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(stage: impl Into<Option<usize>>, message: impl Into<String>) -> Self {
        Error::Config {
            stage: stage.into(),
            message: message.into(),
        }
    }
}
