use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in {count} entries of {params:?}")]
    NonFinite { params: Vec<String>, count: usize },
    #[error("internal graph error: {0}")]
    Internal(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
