//! Deterministic toy transformer and unified KV cell pool.
//!
//! This crate is the numerical substrate of the serving stack: a seeded,
//! fully reproducible word-level model with incremental KV-cache
//! forwarding, plus the cell pool that stores per-(sequence, position,
//! layer) key/value state with region tags, FIFO eviction, range removal,
//! and metadata-only prefix aliasing.

pub mod config;
pub mod error;
pub mod hash;
pub mod kv;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod token;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use kv::{kv_cache_bytes, CellPool, RegionLayout, RegionTag, SeqKind, SequenceId};
pub use model::{greedy_sample, ForwardRequest, Logits, Model};
pub use stats::{Cause, CauseCounts, ForwardStats, Phase, StatsSnapshot};
pub use token::{TokenId, Tokenizer, EOS, RESERVED_VOCAB_SIZE, SEPARATOR};
