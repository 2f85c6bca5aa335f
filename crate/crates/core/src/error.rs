use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can surface. Each variant maps to a stable
/// machine-readable code (see [`Error::code`]) used by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error("singular point in {op}: {msg}")]
    Singular { op: &'static str, msg: String },

    #[error("config error in {op}: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("{}: key `{key}`: {msg}", location(path, *line))]
    ConfigKey {
        path: String,
        line: usize,
        key: String,
        msg: String,
    },

    #[error("format error in {op}: {msg}")]
    Format { op: &'static str, msg: String },

    #[error("consistency error in {op}: {msg}")]
    Consistency { op: &'static str, msg: String },

    #[error("truncated input in {op}: {msg}")]
    Truncated { op: &'static str, msg: String },

    #[error("version mismatch in {op}: expected {expected}, found {found}")]
    Version {
        op: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("corrupt payload in {op}: {msg}")]
    Corrupt { op: &'static str, msg: String },

    #[error("{op}: {path}: {source}")]
    Io {
        op: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            msg: msg.into(),
        }
    }

    pub fn config(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Config {
            op,
            msg: msg.into(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn format(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(op: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            op,
            path: path.into(),
            source,
        }
    }

    /// Stable identifier printed by the CLI alongside the message.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Numeric { .. } => "E_NUMERIC",
            Error::Singular { .. } => "E_SINGULAR",
            Error::Config { .. } | Error::ConfigKey { .. } => "E_CONFIG",
            Error::Contract { .. } => "E_CONTRACT",
            Error::Format { .. } => "E_FORMAT",
            Error::Consistency { .. } => "E_CONSISTENCY",
            Error::Truncated { .. } => "E_TRUNCATED",
            Error::Version { .. } => "E_VERSION",
            Error::Corrupt { .. } => "E_CORRUPT",
            Error::Io { .. } => "E_IO",
        }
    }

    /// Process exit status for this error class (always nonzero).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ConfigKey { .. } => 2,
            Error::Io { .. } => 3,
            Error::Format { .. }
            | Error::Consistency { .. }
            | Error::Truncated { .. }
            | Error::Version { .. }
            | Error::Corrupt { .. } => 4,
            Error::Numeric { .. } | Error::Singular { .. } => 5,
            Error::Shape { .. } | Error::Contract { .. } => 6,
        }
    }
}

/// `path:line`, or just `path` when the offending value came from a default.
fn location(path: &str, line: usize) -> String {
    if line == 0 {
        path.to_string()
    } else {
        format!("{path}:{line}")
    }
}
