use thiserror::Error;

pub type Result<T, E = FrostError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FrostError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("state diverged at step {step}")]
    Divergence { step: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("index {index} out of range (len {len}) in {context}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FrostError {
    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        FrostError::Shape {
            context,
            expected,
            actual,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 numeric, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            FrostError::Config(_)
            | FrostError::Io(_)
            | FrostError::Json(_)
            | FrostError::Csv(_) => 1,
            FrostError::Verification(_) => 3,
            FrostError::Shape { .. }
            | FrostError::Numeric(_)
            | FrostError::Divergence { .. }
            | FrostError::Empty(_)
            | FrostError::Index { .. } => 2,
        }
    }
}
