//! Token accounting. Latency claims in this system are made in forwarded
//! tokens, not wall time, so these counters are the measurement instrument
//! the benchmark and the test suites key on.

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Why a forward pass ran. Doubles as the dispatch priority class, ordered
/// FLASH > SESSION > POOL > STREAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    /// Background evaluation of registered flash queries.
    Flash = 3,
    /// Interactive session queries.
    Session = 2,
    /// Stateless pool completions.
    Pool = 1,
    /// Background data ingestion.
    Stream = 0,
}

pub const ALL_CAUSES: [Cause; 4] = [Cause::Flash, Cause::Session, Cause::Pool, Cause::Stream];

impl Cause {
    pub fn index(self) -> usize {
        match self {
            Cause::Flash => 0,
            Cause::Session => 1,
            Cause::Pool => 2,
            Cause::Stream => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cause::Flash => "FLASH",
            Cause::Session => "SESSION",
            Cause::Pool => "POOL",
            Cause::Stream => "STREAM",
        }
    }
}

/// Prefill = context/prompt/question tokens; Decode = generated tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

/// Monotonic per-cause token counters, readable from any thread.
#[derive(Debug, Default)]
pub struct ForwardStats {
    prefill: [AtomicU64; 4],
    decode: [AtomicU64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CauseCounts {
    pub prefill: u64,
    pub decode: u64,
}

impl CauseCounts {
    pub fn total(&self) -> u64 {
        self.prefill + self.decode
    }
}

/// Point-in-time copy of all counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub flash: CauseCounts,
    pub session: CauseCounts,
    pub pool: CauseCounts,
    pub stream: CauseCounts,
}

impl StatsSnapshot {
    pub fn by_cause(&self, cause: Cause) -> CauseCounts {
        match cause {
            Cause::Flash => self.flash,
            Cause::Session => self.session,
            Cause::Pool => self.pool,
            Cause::Stream => self.stream,
        }
    }

    pub fn total(&self) -> u64 {
        ALL_CAUSES.iter().map(|c| self.by_cause(*c).total()).sum()
    }

    /// Per-cause difference since an earlier snapshot.
    pub fn delta_since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
        let sub = |a: CauseCounts, b: CauseCounts| CauseCounts {
            prefill: a.prefill - b.prefill,
            decode: a.decode - b.decode,
        };
        StatsSnapshot {
            flash: sub(self.flash, earlier.flash),
            session: sub(self.session, earlier.session),
            pool: sub(self.pool, earlier.pool),
            stream: sub(self.stream, earlier.stream),
        }
    }
}

impl ForwardStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, cause: Cause, phase: Phase, tokens: u64) {
        let slot = match phase {
            Phase::Prefill => &self.prefill[cause.index()],
            Phase::Decode => &self.decode[cause.index()],
        };
        slot.fetch_add(tokens, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let read = |i: usize| CauseCounts {
            prefill: self.prefill[i].load(Ordering::Relaxed),
            decode: self.decode[i].load(Ordering::Relaxed),
        };
        StatsSnapshot {
            flash: read(Cause::Flash.index()),
            session: read(Cause::Session.index()),
            pool: read(Cause::Pool.index()),
            stream: read(Cause::Stream.index()),
        }
    }
}
