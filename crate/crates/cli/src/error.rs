use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    Core(couple_core::Error),
    Io { path: String, message: String },
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }

    /// Prints the JSON error record to stderr.
    pub fn report(&self) -> ExitCode {
        let record = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        eprintln!("{record}");
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            _ => 1,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, message } => write!(f, "i/o error on {path}: {message}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<couple_core::Error> for CliError {
    fn from(e: couple_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
