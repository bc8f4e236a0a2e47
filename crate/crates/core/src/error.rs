use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite function value during evaluation: {0}")]
    EvaluationError(String),
    #[error("dataset generation failed: {0}")]
    GenerationError(String),
    #[error("donor sample must come from a different class (both are `{0}`)")]
    InvalidDonor(String),
    #[error("format error in {file}: {msg}")]
    FormatError { file: String, msg: String },
    #[error("unsupported version `{found}` (expected `{expected}`)")]
    VersionError { found: String, expected: &'static str },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("prompt needs {needed} tokens but context length is {limit}")]
    PromptTooLong { needed: usize, limit: usize },
    #[error("positive and negative concept vectors coincide")]
    DegenerateAnchors,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("dataset has no trainable samples")]
    EmptyDataset,
    #[error("no memory bank for class index {0}")]
    MissingBank(usize),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {file}: {source}")]
    Json {
        file: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn format(file: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::FormatError {
            file: file.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes a parameter message with the config section it came from.
    pub fn within(self, section: &str) -> Self {
        match self {
            Error::InvalidParameter(msg) => Error::InvalidParameter(format!("{section}.{msg}")),
            other => other,
        }
    }
}
