use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config {path}:{line}: key `{key}`: {msg}")]
    ConfigParse {
        path: String,
        line: usize,
        key: String,
        msg: String,
    },

    #[error("non-finite function value while probing coordinate {0}")]
    NonFinite(usize),

    #[error("basis generation failed: worst |cos| {worst_cos:.6} exceeds the limit {max_cosine}")]
    GenerationFailure { worst_cos: f64, max_cosine: f64 },

    #[error("degenerate batch: no anchor has a positive sample")]
    DegenerateBatch,

    #[error("capacity exhausted: every unit is already claimed by earlier tasks")]
    CapacityExhausted,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "degenerate-input",
            Error::InvalidCovariance(_) => "invalid-covariance",
            Error::Config(_) | Error::ConfigParse { .. } => "config",
            Error::NonFinite(_) => "non-finite",
            Error::GenerationFailure { .. } => "generation-failure",
            Error::DegenerateBatch => "degenerate-batch",
            Error::CapacityExhausted => "capacity-exhausted",
            Error::Precondition(_) => "precondition",
            Error::CheckFailed(_) => "check-failed",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Task { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
