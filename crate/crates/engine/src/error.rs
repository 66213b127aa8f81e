use streamkv_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("unknown session {0}")]
    UnknownSession(u64),

    #[error("session quota reached: all session slots in use")]
    SessionQuota,

    #[error("dispatch worker is shutting down")]
    Shutdown,

    #[error("flash registry full (cap {cap})")]
    RegistryFull { cap: usize },

    #[error("flash question must be non-empty")]
    EmptyQuestion,

    #[error("query tokenized to an empty sequence")]
    EmptyQuery,

    #[error("header text tokenized to an empty sequence")]
    EmptyHeader,

    #[error("timed out waiting for a free sequence slot")]
    SlotTimeout,

    #[error("request needs {needed_cells} cells, exceeding the admission budget {budget}")]
    RequestTooLarge { needed_cells: u64, budget: u64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("batch of {batch_tokens} tokens exceeds the retention window of {retention}")]
    BatchExceedsRetention { batch_tokens: u64, retention: u64 },

    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;
