use lplr_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    /// Invalid or unreadable configuration; exit code 1.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
