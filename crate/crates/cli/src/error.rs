use std::fmt;
use std::io;
use std::path::Path;

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit 2.
    Config(String),
    /// A referenced input does not exist; exit 3.
    MissingFile(String),
    /// Any other failure; exit 1.
    Run(abound::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Run(_) => 1,
        }
    }

    pub fn from_io(path: &Path, e: io::Error) -> Self {
        CliError::from(abound::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

impl From<abound::Error> for CliError {
    fn from(e: abound::Error) -> Self {
        use abound::Error as E;
        match e {
            E::Io { ref path, ref source } if source.kind() == io::ErrorKind::NotFound => {
                CliError::MissingFile(path.display().to_string())
            }
            E::InvalidParameter(_) | E::PromptTooLong { .. } | E::UnknownClass(_) => CliError::Config(e.to_string()),
            other => CliError::Run(other),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::MissingFile(path) => write!(f, "missing file: {path}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}
