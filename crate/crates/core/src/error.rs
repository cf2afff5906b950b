use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MimError>;

#[derive(Debug, Error)]
pub enum MimError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An argument lies outside its documented range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A configuration record is inconsistent or unsupported.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// A non-finite value appeared during an iterative computation.
    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("persistence error at {path}: {source}")]
    Persistence {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A serialized stream did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),
}

impl MimError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        MimError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MimError::Persistence {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MimError::Numerical { .. } => 2,
            _ => 1,
        }
    }
}
