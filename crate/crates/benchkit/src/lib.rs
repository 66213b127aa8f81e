//! Benchmark harness for the streaming inference engine: synthetic OHLCV
//! data with market phases, the streaming scenario in stateful and
//! request-driven modes, and token-accounting latency reports.

pub mod dataset;
pub mod report;
pub mod scenario;

pub use dataset::{gen_dataset, gen_dataset_labeled, MarketPhase, OhlcvRecord, RECORD_TOKENS};
pub use report::{IterationRow, LatencyReport, Summary};
pub use scenario::{run_scenario, Mode, ScenarioConfig, QUERY_SET, SYSTEM_PROMPT};
