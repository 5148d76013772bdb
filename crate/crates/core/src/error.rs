use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the CLI exit-code contract: `Config` and
/// `Contract` are usage errors, `Numeric` is a numeric failure, the rest
/// are data errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error, line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("tag derivation failed for sentence {sentence}: {msg}")]
    Derivation { sentence: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
