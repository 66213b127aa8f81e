//! Service configuration: one TOML file drives the model shape, pool
//! sizing, ring behavior, scheduler tuning, session defaults, cache
//! capacities, and the listen address.

use crate::error::{EngineError, Result};
use crate::planner::PldConfig;
use crate::session::SessionSettings;
use serde::{Deserialize, Serialize};
use streamkv_core::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Unified KV cache size in cells (token x layer).
    pub capacity_cells: u64,
    /// Transient sequence slots for stateless requests (P).
    pub transient_slots: usize,
    /// Session sequence slots (S).
    pub session_slots: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { capacity_cells: 262_144, transient_slots: 16, session_slots: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RingConfig {
    /// Ring capacity in records, sized to absorb typical bursts.
    pub capacity: usize,
    /// Ingestion batch size b (records per cycle).
    pub batch_records: usize,
    /// Records longer than this are skipped and counted as malformed.
    pub max_record_chars: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self { capacity: 1024, batch_records: 64, max_record_chars: 4096 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    /// Per-iteration prefill token budget feeding the chunk formula.
    pub n_batch: usize,
    pub pld: PldConfig,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { n_batch: 1024, pld: PldConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub response_entries: usize,
    pub render_entries: usize,
    pub tokenize_entries: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { response_entries: 1024, render_entries: 256, tokenize_entries: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen: String,
    /// Per-session event replay buffer (resume window).
    pub event_replay: usize,
    /// Broadcast channel capacity; lagging subscribers are disconnected.
    pub event_channel: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { listen: "127.0.0.1:8080".into(), event_replay: 1024, event_channel: 256 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub model: ModelConfig,
    pub pool: PoolConfig,
    pub ring: RingConfig,
    pub scheduler: SchedulerConfig,
    pub session: SessionSettings,
    pub caches: CacheConfig,
    pub server: ServerConfig,
}

impl ServiceConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ServiceConfig =
            toml::from_str(s).map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| EngineError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(EngineError::from)?;
        if self.pool.capacity_cells == 0 {
            return Err(EngineError::InvalidConfig("pool.capacity_cells must be > 0".into()));
        }
        if self.pool.transient_slots == 0 {
            return Err(EngineError::InvalidConfig("pool.transient_slots must be > 0".into()));
        }
        if self.ring.batch_records == 0 {
            return Err(EngineError::InvalidConfig("ring.batch_records must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = ServiceConfig::default();
        assert_eq!(cfg.pool.capacity_cells, 262_144);
        assert_eq!(cfg.pool.transient_slots, 16);
        assert_eq!(cfg.pool.session_slots, 16);
        assert_eq!(cfg.ring.capacity, 1024);
        assert_eq!(cfg.ring.batch_records, 64);
        assert_eq!(cfg.scheduler.n_batch, 1024);
        assert_eq!(cfg.session.tau, 2.0);
        assert_eq!(cfg.session.header_text, "ANSWER:");
        assert_eq!(cfg.caches.response_entries, 1024);
        assert_eq!(cfg.caches.render_entries, 256);
        assert_eq!(cfg.caches.tokenize_entries, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ServiceConfig::default();
        let s = cfg.to_toml_string();
        let back = ServiceConfig::from_toml_str(&s).unwrap();
        assert_eq!(back.pool.capacity_cells, cfg.pool.capacity_cells);
        assert_eq!(back.session.fast_vocab, cfg.session.fast_vocab);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ServiceConfig::from_toml_str(
            r#"
            [model]
            weight_seed = 99

            [session]
            tau = 1.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.weight_seed, 99);
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.session.tau, 1.5);
    }

    #[test]
    fn invalid_toml_is_rejected() {
        assert!(ServiceConfig::from_toml_str("model = 3").is_err());
        assert!(ServiceConfig::from_toml_str("[model]\nlayers = 0").is_err());
    }
}
