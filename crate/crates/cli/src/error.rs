use std::path::PathBuf;

use allocrisk::AllocError;
use allocrisk_service::ApiError;
use serde::Serialize;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: line {line}, column {column}: {value:?} is not a finite number", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        column: usize,
        value: String,
    },
    #[error("{}: line {line} has {found} fields, expected {expected}", path.display())]
    RaggedRows {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{}: no data rows", path.display())]
    EmptyFile { path: PathBuf },
    #[error("{}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] AllocError),
    #[error("{}", .0.message)]
    Service(ApiError),
}

/// Machine-readable error written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub module: String,
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn module(&self) -> &str {
        match self {
            CliError::Engine(e) => e.module(),
            CliError::Service(e) => &e.module,
            CliError::Config(_) => "config",
            _ => "io",
        }
    }

    pub fn code(&self) -> &str {
        match self {
            CliError::Io { .. } => "IoError",
            CliError::Parse { .. } | CliError::Malformed { .. } => "ParseError",
            CliError::RaggedRows { .. } => "RaggedRows",
            CliError::EmptyFile { .. } => "EmptyFile",
            CliError::Config(_) => "ConfigError",
            CliError::Engine(e) => e.code(),
            CliError::Service(e) => &e.code,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Engine(e) if e.is_infeasible() => EXIT_INFEASIBLE,
            CliError::Service(e) if matches!(e.code.as_str(), "InfeasibleConstraint" | "OddN") => EXIT_INFEASIBLE,
            _ => EXIT_ERROR,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            module: self.module().to_string(),
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        CliError::Service(e)
    }
}
