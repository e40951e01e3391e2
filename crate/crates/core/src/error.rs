use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error("task is unsolvable from this state")]
    Unsolvable,
    #[error("task generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error("invalid image token {id} (codebook size {size})")]
    InvalidToken { id: u32, size: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad kernel: {0}")]
    BadKernel(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("missing field for sequence: {0}")]
    MissingField(&'static str),
    #[error("sequence length {len} exceeds maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("degenerate advantage group: {0}")]
    DegenerateGroup(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not deterministic: {0} vs {1}")]
    NonDeterministicLoss(f64, f64),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("reward failure: {0}")]
    RewardFailure(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("forward-call counter mismatch: expected {expected}, observed {observed}")]
    CounterMismatch { expected: u64, observed: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
