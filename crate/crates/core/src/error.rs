use comix_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComixError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("layout placement failed after {reseeds} reseeds: {reason}")]
    Placement { reseeds: usize, reason: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("non-finite {what} at episode {episode}")]
    NonFinite { what: String, episode: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ComixError> = std::result::Result<T, E>;
