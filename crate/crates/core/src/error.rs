use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are grouped so that callers (the CLI in particular) can tell
/// validation problems in user input apart from failures at run time.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("no attention targets: key/value set is empty")]
    NoAttentionTargets,

    #[error("matrix is rank deficient (pivot {pivot:e} below tolerance {tol:e})")]
    Singular { pivot: f64, tol: f64 },

    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("sequence of {len} pieces exceeds the maximum of {max}")]
    Overlength { len: usize, max: usize },

    #[error("index {index} out of range (limit {limit}) in {what}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("unknown entity id {id} for knowledge base `{kb}`")]
    UnknownEntity { kb: String, id: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input or configuration, as opposed
    /// to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Invalid(_)
                | Error::Config(_)
                | Error::StageOrder(_)
                | Error::UnknownEntity { .. }
                | Error::UnknownGroup(_)
                | Error::Overlength { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
