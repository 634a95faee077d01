use thiserror::Error;

/// Errors raised anywhere in the selection pipeline.
///
/// Variants are grouped by failure class so front ends can map them to
/// distinct exit codes (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error for example `{id}`: {msg}")]
    Numerical { id: String, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("model too large for dense path: {dim} parameters (cap {cap})")]
    Size { dim: usize, cap: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used for exit codes and report annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Config,
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(id: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numerical {
            id: id.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Input(_) | Error::Io(_) | Error::Json(_) => ErrorClass::Input,
            Error::Numerical { .. } | Error::Training { .. } => ErrorClass::Numerical,
            Error::Config(_) | Error::Size { .. } => ErrorClass::Config,
            Error::Stage { source, .. } => source.class(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
