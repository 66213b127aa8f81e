//! Stateful streaming inference engine: persistent KV-cache sessions fed
//! by non-blocking ingestion rings, ahead-of-time flash query evaluation,
//! a four-class priority dispatch worker, a continuous-batching pool for
//! stateless completions, and the radix/response cache substrate.

pub mod config;
pub mod dispatch;
pub mod engine;
pub mod error;
pub mod events;
pub mod flash;
pub mod planner;
pub mod pool_driver;
pub mod poolcache;
pub mod ring;
pub mod session;
pub mod util;

pub use config::ServiceConfig;
pub use engine::{ChatMessage, CompletionResult, CreateSession, Engine, EngineStats, PushReport};
pub use error::{EngineError, Result};
pub use events::{Event, EventKind};
pub use session::{QueryOutcome, QueryPath, SessionSettings};
