use thiserror::Error;
use wst_autograd::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown style id {0}; styles are 0 and 1")]
    UnknownStyle(usize),
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("corpus is missing style {0}")]
    MissingLabel(u8),
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
