use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json error: {0}")]
    Json(#[from] serde_json::Error),
}
