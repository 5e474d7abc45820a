//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape / dimension violations. Reports both offending shapes.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// API contract violations (wrong argument kinds, empty batches, mixed tapes).
    #[error("contract error: {0}")]
    Contract(String),

    /// Differentiating through more than one nested backward pass.
    #[error("unsupported differentiation depth: at most 2 backward passes per tape")]
    UnsupportedDepth,

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Bad or inconsistent input data (missing properties, unknown elements...).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value was produced where finite math was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn parse(path: Option<&PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "<input>".to_string()),
            line,
            msg: msg.into(),
        }
    }

    /// Stable process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::Version { .. }
            | Error::Shape { .. }
            | Error::UnsupportedDepth => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
