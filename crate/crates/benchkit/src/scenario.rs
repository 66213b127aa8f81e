//! The streaming benchmark scenario: initialize with a data backlog, then
//! alternate data pushes and analytical queries while the context grows.
//!
//! Two modes share the same dataset and query set:
//! - stateful: one persistent session; pushes go to its ring, queries cost
//!   only their own tokens.
//! - request_driven: no session; every query replays the full accumulated
//!   context through the stateless completion endpoint, the shape of a
//!   conventional request-driven serving stack.

use crate::dataset::{gen_dataset, OhlcvRecord, RECORD_TOKENS};
use crate::report::{IterationRow, LatencyReport};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};
use streamkv_engine::engine::CreateSession;
use streamkv_engine::{Engine, EngineError};

pub const SYSTEM_PROMPT: &str = "O H L C V ; UP DOWN YES NO";

/// Fixed analytical query set.
pub const QUERY_SET: [(&str, &str); 6] = [
    ("Q1", "What is the current trend ? Reply UP or DOWN"),
    ("Q2", "Is there a pullback in the recent bars ? Reply YES or NO"),
    ("Q3", "Did the price reach a recent high ? Reply YES or NO"),
    ("Q4", "Is the market consolidating sideways ? Reply YES or NO"),
    ("Q5", "Is volume rising across recent bars ? Reply YES or NO"),
    ("Q6", "What was the last close value ? Reply with the number"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stateful,
    RequestDriven,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Stateful => "stateful",
            Mode::RequestDriven => "request_driven",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub init_samples: usize,
    pub iterations: usize,
    pub samples_per_iter: usize,
    pub data_seed: u64,
    pub max_tokens: usize,
    pub allow_speculative: bool,
    /// Run only this query (index into the set) instead of cycling Q1-Q6.
    pub fixed_query: Option<usize>,
    /// Questions registered as flash queries at session creation.
    pub flash_questions: Vec<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Stateful,
            init_samples: 100,
            iterations: 15,
            samples_per_iter: 55,
            data_seed: 42,
            max_tokens: 16,
            allow_speculative: false,
            fixed_query: None,
            flash_questions: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn total_samples(&self) -> usize {
        self.init_samples + self.iterations * self.samples_per_iter
    }

    fn query_for(&self, iteration: usize) -> (&'static str, &'static str) {
        let idx = self.fixed_query.unwrap_or((iteration - 1) % QUERY_SET.len());
        QUERY_SET[idx % QUERY_SET.len()]
    }
}

/// Numeric-format check for the exact-value query: the response must be a
/// non-empty run of digit tokens. Value correctness is a model-quality
/// question and out of scope.
pub fn numeric_format_ok(text: &str) -> bool {
    let t = text.trim();
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit() || c.is_whitespace())
}

pub fn run_scenario(engine: &Engine, cfg: &ScenarioConfig) -> Result<LatencyReport, EngineError> {
    let data = gen_dataset(cfg.data_seed, cfg.total_samples());
    match cfg.mode {
        Mode::Stateful => run_stateful(engine, cfg, &data),
        Mode::RequestDriven => run_request_driven(engine, cfg, &data),
    }
}

fn record_strings(records: &[OhlcvRecord]) -> Vec<String> {
    records.iter().map(|r| r.to_record_string()).collect()
}

fn run_stateful(
    engine: &Engine,
    cfg: &ScenarioConfig,
    data: &[OhlcvRecord],
) -> Result<LatencyReport, EngineError> {
    let session = engine.create_session(CreateSession {
        system_prompt: SYSTEM_PROMPT.to_string(),
        flash_questions: cfg.flash_questions.clone(),
        ..Default::default()
    })?;
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut complete = true;
    let result = (|| -> Result<(), EngineError> {
        engine.push_records(session, &record_strings(&data[..cfg.init_samples]))?;
        engine.wait_idle(session, Duration::from_secs(600))?;
        for iteration in 1..=cfg.iterations {
            let lo = cfg.init_samples + (iteration - 1) * cfg.samples_per_iter;
            let hi = lo + cfg.samples_per_iter;
            engine.push_records(session, &record_strings(&data[lo..hi]))?;
            engine.wait_idle(session, Duration::from_secs(600))?;
            let (label, text) = cfg.query_for(iteration);
            let before = engine.dispatch().stats().snapshot();
            let start = Instant::now();
            let outcome =
                engine.query(session, text, Some(cfg.max_tokens), cfg.allow_speculative)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let delta = engine.dispatch().stats().snapshot().delta_since(&before);
            let info = engine.session_info(session)?;
            rows.push(IterationRow {
                iteration: iteration as u32,
                mode: cfg.mode.name().into(),
                query: label.into(),
                path: outcome.path.name().into(),
                wall_ms,
                query_tokens: outcome.query_tokens,
                generated_tokens: outcome.generated_tokens,
                session_tokens: delta.session.total(),
                stream_tokens: delta.stream.total(),
                flash_tokens: delta.flash.total(),
                pool_tokens: delta.pool.total(),
                context_tokens: info.context_tokens,
                format_ok: if label == "Q6" {
                    numeric_format_ok(&outcome.text)
                } else {
                    true
                },
                status: String::new(),
            });
        }
        Ok(())
    })();
    let _ = engine.delete_session(session);
    if let Err(e) = result {
        if rows.is_empty() {
            return Err(e);
        }
        complete = false;
    }
    Ok(LatencyReport::new(rows, complete))
}

fn run_request_driven(
    engine: &Engine,
    cfg: &ScenarioConfig,
    data: &[OhlcvRecord],
) -> Result<LatencyReport, EngineError> {
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut complete = true;
    let mut context = String::new();
    let mut push_all = |ctx: &mut String, records: &[OhlcvRecord]| {
        for r in records {
            ctx.push_str(&r.to_record_string());
            ctx.push(' ');
        }
    };
    push_all(&mut context, &data[..cfg.init_samples]);
    let result = (|| -> Result<(), EngineError> {
        for iteration in 1..=cfg.iterations {
            let lo = cfg.init_samples + (iteration - 1) * cfg.samples_per_iter;
            let hi = lo + cfg.samples_per_iter;
            push_all(&mut context, &data[lo..hi]);
            let (label, text) = cfg.query_for(iteration);
            // The conventional shape: the full accumulated context is part
            // of every request's prompt.
            let prompt = format!("{SYSTEM_PROMPT} {context}{text}");
            let context_tokens = engine.tokenizer().tokenize(&prompt).len() as u64;
            let before = engine.dispatch().stats().snapshot();
            let start = Instant::now();
            let outcome = engine.complete(&prompt, cfg.max_tokens)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let delta = engine.dispatch().stats().snapshot().delta_since(&before);
            rows.push(IterationRow {
                iteration: iteration as u32,
                mode: cfg.mode.name().into(),
                query: label.into(),
                path: "STANDARD".into(),
                wall_ms,
                query_tokens: engine.tokenizer().tokenize(text).len() as u64,
                generated_tokens: outcome.tokens.len() as u64,
                session_tokens: delta.session.total(),
                stream_tokens: delta.stream.total(),
                flash_tokens: delta.flash.total(),
                pool_tokens: delta.pool.total(),
                context_tokens,
                format_ok: if label == "Q6" {
                    numeric_format_ok(&outcome.text)
                } else {
                    true
                },
                status: String::new(),
            });
        }
        Ok(())
    })();
    if let Err(e) = result {
        if rows.is_empty() {
            return Err(e);
        }
        complete = false;
    }
    Ok(LatencyReport::new(rows, complete))
}

#[cfg(test)]
mod tests {
    use super::*;
    use streamkv_core::ModelConfig;
    use streamkv_engine::ServiceConfig;

    fn small_engine() -> Engine {
        let mut cfg = ServiceConfig::default();
        cfg.model = ModelConfig::tiny_for_tests();
        Engine::new(cfg).unwrap()
    }

    fn small_scenario(mode: Mode) -> ScenarioConfig {
        ScenarioConfig {
            mode,
            init_samples: 5,
            iterations: 3,
            samples_per_iter: 3,
            max_tokens: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_empty_report() {
        let engine = small_engine();
        let cfg = ScenarioConfig { iterations: 0, ..small_scenario(Mode::Stateful) };
        let report = run_scenario(&engine, &cfg).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.complete);
    }

    #[test]
    fn stateful_session_cost_excludes_context() {
        let engine = small_engine();
        let cfg = ScenarioConfig { fixed_query: Some(0), ..small_scenario(Mode::Stateful) };
        let report = run_scenario(&engine, &cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert_eq!(row.session_tokens, row.query_tokens + row.generated_tokens);
        }
        // Context grows while per-query cost does not.
        assert!(report.rows[2].context_tokens > report.rows[0].context_tokens);
        assert_eq!(report.rows[0].query_tokens, report.rows[2].query_tokens);
    }

    #[test]
    fn request_driven_prefill_tracks_context_growth() {
        let engine = small_engine();
        let report =
            run_scenario(&engine, &small_scenario(Mode::RequestDriven)).unwrap();
        assert_eq!(report.rows.len(), 3);
        for (i, row) in report.rows.iter().enumerate() {
            let expected_context = (5 + 3 * (i as u64 + 1)) * RECORD_TOKENS as u64;
            assert!(
                row.context_tokens > expected_context,
                "context tokens include records plus prompt overhead"
            );
            // The stateless path prefills the whole prompt every time.
            assert!(row.pool_tokens >= expected_context);
            assert_eq!(row.session_tokens, 0);
        }
        assert!(report.rows[2].pool_tokens > report.rows[0].pool_tokens);
    }

    #[test]
    fn numeric_format_check() {
        assert!(numeric_format_ok("42"));
        assert!(numeric_format_ok(" 1 2 "));
        assert!(!numeric_format_ok("UP"));
        assert!(!numeric_format_ok(""));
    }
}
