use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("infeasible split: {0}")]
    Infeasible(String),

    #[error("fold construction failed: {0}")]
    Fold(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("optimizer state: {0}")]
    State(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("non-finite loss at epoch {epoch}")]
    Numeric { epoch: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("regularization selection failed: {0}")]
    Selection(String),

    #[error("augmentation policy violated: {0}")]
    Policy(String),

    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for configuration problems, including ones raised inside a stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
