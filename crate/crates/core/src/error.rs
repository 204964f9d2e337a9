use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("empty point cloud")]
    EmptyPointCloud,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("non-finite value during sampling at step {step}")]
    SamplingDiverged { step: usize },
    #[error("phase count: expected 3 phase sentences, got {0}")]
    PhaseCount(usize),
    #[error("language model request failed (retriable): {reason}")]
    LanguageModel { prompt: String, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing checkpoint for phase {phase}: {path}")]
    MissingCheckpoint { phase: String, path: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] hoimotion_nn::NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Whether the failure stems from numerics rather than inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, CoreError::NonFinite(_) | CoreError::SamplingDiverged { .. })
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, CoreError::LanguageModel { .. })
    }
}
