use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {what}: {msg}")]
    Format { what: String, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run with seed {seed} failed: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short machine-readable category, used for single-line CLI errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Data(_) => "data",
            Error::Format { .. } => "format",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Seed { source, .. } => source.category(),
        }
    }

    /// The message without the category prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Dimension(m)
            | Error::Parameter(m)
            | Error::Contract(m)
            | Error::Data(m)
            | Error::Usage(m) => m.clone(),
            Error::Config { field, msg } => format!("`{field}`: {msg}"),
            Error::Format { what, msg } => format!("{what}: {msg}"),
            Error::Io { path, source } => format!("{}: {source}", path.display()),
            Error::Seed { seed, source } => format!("seed {seed}: {}", source.detail()),
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn format(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
