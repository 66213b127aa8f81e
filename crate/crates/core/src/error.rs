use crate::kv::SequenceId;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoreError {
    #[error("cell pool exhausted: need {needed} cells, {available} available")]
    PoolExhausted { needed: u64, available: u64 },

    #[error("unknown sequence {0:?}")]
    UnknownSequence(SequenceId),

    #[error("sequence {seq:?} already registered")]
    SequenceExists { seq: SequenceId },

    #[error("position {pos} does not follow the last cached position {last} of {seq:?}")]
    PositionOrder { seq: SequenceId, pos: u32, last: u32 },

    #[error("forward over an empty token sequence is rejected")]
    EmptyTokens,

    #[error("sequence length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("{have} sliding tokens present, cannot evict {requested}")]
    InsufficientSliding { requested: u64, have: u64 },

    #[error("alias target {seq:?} is not empty")]
    AliasTargetNotEmpty { seq: SequenceId },

    #[error("alias donor {seq:?} holds {have} contiguous tokens, need {requested}")]
    AliasDonorTooShort { seq: SequenceId, requested: u64, have: u64 },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
}

pub type Result<T> = std::result::Result<T, CoreError>;
