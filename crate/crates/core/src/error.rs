use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("distance must be positive and finite, got {0}")]
    Domain(f64),

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("incompatible input: {0}")]
    Incompatible(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite {term} at iteration {iteration} (batch sample {sample}, entry {index})")]
    NonFinite {
        iteration: u64,
        sample: usize,
        index: usize,
        term: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
