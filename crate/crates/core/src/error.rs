use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("{what} too large: {size} exceeds cap {cap}")]
    TooLarge { what: &'static str, size: u128, cap: u128 },

    #[error("numerical failure at epoch {epoch}: {detail}")]
    NumericalFailure { epoch: usize, detail: String },

    #[error("degenerate diversity: nu must be positive")]
    DegenerateDiversity,

    #[error("degenerate spectrum: sigma_k of the target matrix is zero")]
    DegenerateSpectrum,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at `{path}` (line {line}, column {column}): {msg}")]
    Parse { path: String, line: usize, column: usize, msg: String },

    #[error("unsupported file version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("invalid value for `{field}`: {msg}")]
    Validation { field: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), msg: msg.into() }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 1 validation, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::NumericalFailure { .. } | Error::DegenerateDiversity | Error::DegenerateSpectrum => 2,
            _ => 1,
        }
    }
}

/// Converts a `serde_path_to_error` failure into a [`Error::Parse`] with the
/// JSON path of the offending field.
pub(crate) fn parse_error(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = err.path().to_string();
    let inner = err.into_inner();
    Error::Parse { path, line: inner.line(), column: inner.column(), msg: inner.to_string() }
}
