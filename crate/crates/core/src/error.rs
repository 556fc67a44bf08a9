use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: schedule parameters, model roster, codec setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values encountered while stepping or in a forward pass.
    #[error("numeric error{}{}: {message}", fmt_step(.step), fmt_layer(.layer))]
    Numeric {
        step: Option<usize>,
        layer: Option<usize>,
        message: String,
    },

    /// Cache or persisted-state integrity violation.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

fn fmt_step(step: &Option<usize>) -> String {
    step.map(|s| format!(" at step {s}")).unwrap_or_default()
}

fn fmt_layer(layer: &Option<usize>) -> String {
    layer.map(|l| format!(" in layer {l}")).unwrap_or_default()
}

impl Error {
    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            step: None,
            layer: None,
            message: message.into(),
        }
    }

    /// Attach a step index to a numeric error that does not carry one yet.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric {
                step: None,
                layer,
                message,
            } => Error::Numeric {
                step: Some(step),
                layer,
                message,
            },
            other => other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
