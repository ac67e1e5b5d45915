use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}{}", context_suffix(.context))]
    NonFinite { op: String, context: String },

    #[error("degenerate vector in {op}: norm {norm:e} <= {eps:e}")]
    Degenerate { op: &'static str, norm: f64, eps: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input data: {0}")]
    Data(String),

    #[error("weight container: {0}")]
    Format(#[from] FormatError),

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("gradient: {0}")]
    Grad(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("magic mismatch: expected DIPAW1, found {0:?}")]
    BadMagic([u8; 8]),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("integrity error for `{name}`: {detail}")]
    Integrity { name: String, detail: String },
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::Degenerate { .. } | Error::Grad(_) => ErrorKind::Numerical,
            Error::Config(_) => ErrorKind::Usage,
            Error::Shape { .. }
            | Error::Data(_)
            | Error::Format(_)
            | Error::MissingWeight(_)
            | Error::Json(_)
            | Error::Io(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn non_finite(op: impl Into<String>, context: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into(), context: context.into() }
    }

    /// I/O failure tagged with the path involved.
    pub fn io_at(path: &std::path::Path, e: io::Error) -> Self {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Prefixes the context of a numerical error, leaving other variants alone.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::NonFinite { op, context } => Error::NonFinite {
                op,
                context: if context.is_empty() {
                    ctx.as_ref().to_string()
                } else {
                    format!("{}: {context}", ctx.as_ref())
                },
            },
            other => other,
        }
    }
}
