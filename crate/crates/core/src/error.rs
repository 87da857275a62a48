use std::path::PathBuf;

/// Errors surfaced by the library.
///
/// Variants fall into three families that the CLI maps onto distinct exit
/// codes: configuration/validation, data, and numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate quaternion")]
    DegenerateQuaternion,

    #[error("empty content")]
    EmptyContent,

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("refinement failed at iteration {iteration}: {source}")]
    Refinement {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by arithmetic blowing up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteActivation { .. } | Error::NonFiniteLoss { .. } => true,
            Error::Refinement { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// True for invalid configuration or arguments.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Refinement { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
