use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or an input shape is invalid.
    #[error("invalid configuration for `{key}`: {message}")]
    Config { key: String, message: String },

    /// Dirichlet partitioning could not satisfy the per-client minimums.
    #[error("partition failed after {attempts} attempts: {constraint}")]
    Partition { attempts: usize, constraint: String },

    /// A text table or config file could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A binary parameter record is malformed.
    #[error("malformed parameter record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
