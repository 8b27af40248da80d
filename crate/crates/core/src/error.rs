use thiserror::Error;

/// Every failure the compiler, planner or executor can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("execution error in region {region}: {msg}")]
    Execution { region: usize, msg: String },

    #[error("checkpoint plan violation: {0}")]
    Checkpoint(String),

    #[error("check failed: {0}")]
    Check(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI; distinct per error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Parse { .. } => 3,
            Error::Config(_) => 4,
            Error::Shape(_) | Error::Unsupported(_) => 5,
            Error::Plan(_) => 6,
            Error::Execution { .. } | Error::Checkpoint(_) => 7,
            Error::Check(_) => 8,
        }
    }
}
