use thiserror::Error;

/// Error type shared by every engine module.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("validation: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("diffusion step {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("audio ingestion: {0}")]
    Audio(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EngineError {
    pub fn dimension(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        EngineError::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors the caller caused (bad config, bad input files);
    /// commands map these to exit code 2 and everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            EngineError::Validation(_)
                | EngineError::Dimension { .. }
                | EngineError::Config(_)
                | EngineError::StepOutOfRange { .. }
                | EngineError::Parse { .. }
                | EngineError::Dataset(_)
                | EngineError::Audio(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;
