//! Engine facade: wires the model, cell pool, dispatch worker, sequence
//! pool, stateless completion driver, and per-session ingestion workers
//! behind one blocking API. The gateway exposes this over HTTP; the
//! benchmark drives it in-process.

use crate::config::ServiceConfig;
use crate::dispatch::{DispatchHandle, DispatchWorker, SchedulerCounters};
use crate::error::{EngineError, Result};
use crate::events::{Event, EventBus, EventKind};
use crate::flash;
use crate::pool_driver::{CompletionOutput, PoolDriverConfig, PoolEngine, PoolSnapshot};
use crate::poolcache::{derive_seed, LruCache, ResponseCache, SequencePool};
use crate::ring::RecordRing;
use crate::session::{self, QueryOutcome, SessionSettings, SessionState};
use crate::util::Turnstile;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};
use streamkv_core::hash::fnv1a64;
use streamkv_core::{
    Cause, ForwardStats, Model, RegionLayout, SeqKind, SequenceId, StatsSnapshot, TokenId,
    Tokenizer,
};
use tokio::sync::broadcast;

/// Session creation payload; unset fields fall back to the service config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub system_prompt: String,
    #[serde(default)]
    pub flash_questions: Vec<String>,
    pub retention_tokens: Option<u64>,
    pub tau: Option<f32>,
    pub header_text: Option<String>,
    pub fast_vocab: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PushReport {
    pub accepted: u64,
    pub skipped: u64,
    pub dropped_total: u64,
    pub pending: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompletionResult {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub seed: u32,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionInfo {
    pub session_id: u64,
    pub data_version: u64,
    pub records_ingested: u64,
    pub context_tokens: u64,
    pub layout: RegionLayout,
    pub flash_registered: usize,
    pub ring_pending: u64,
    pub ring_dropped_total: u64,
    pub paths: session::PathCounts,
    #[serde(skip)]
    pub seq: SequenceId,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheCounters {
    pub entries: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EngineStats {
    pub forwards: StatsSnapshot,
    pub scheduler: SchedulerCounters,
    pub pool: PoolSnapshot,
    pub occupancy_used: u64,
    pub occupancy_capacity: u64,
    pub response_cache: CacheCounters,
    pub render_cache: CacheCounters,
    pub tokenize_cache: CacheCounters,
    pub sessions: Vec<SessionInfo>,
}

#[derive(Debug, Default)]
struct IngestProgress {
    records_ingested: u64,
    batches: u64,
    busy: bool,
    last_error: Option<String>,
}

pub struct SessionHandle {
    pub id: u64,
    seq: SequenceId,
    turnstile: Turnstile,
    state: Mutex<SessionState>,
    ring: RecordRing,
    bus: EventBus,
    stop: AtomicBool,
    work_mx: Mutex<()>,
    work_cv: Condvar,
    progress: Mutex<IngestProgress>,
    progress_cv: Condvar,
    accepted_total: AtomicU64,
    skipped_total: AtomicU64,
}

struct SessionEntry {
    handle: Arc<SessionHandle>,
    worker: Option<thread::JoinHandle<()>>,
}

pub struct Engine {
    cfg: ServiceConfig,
    tokenizer: Arc<Tokenizer>,
    // Drop order: pool driver and sessions finish before the worker goes.
    pool_engine: PoolEngine,
    sessions: Mutex<HashMap<u64, SessionEntry>>,
    worker: DispatchWorker,
    handle: DispatchHandle,
    seq_pool: Arc<SequencePool>,
    next_session: AtomicU64,
    response_cache: Mutex<ResponseCache>,
    render_cache: Mutex<LruCache<u64, String>>,
    tokenize_cache: Mutex<LruCache<u64, Vec<TokenId>>>,
}

impl Engine {
    pub fn new(cfg: ServiceConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Arc::new(Model::new(&cfg.model)?);
        let tokenizer = Arc::new(Tokenizer::new(cfg.model.vocab_size)?);
        let pool = streamkv_core::CellPool::new(
            cfg.model.layers,
            cfg.model.model_dim,
            cfg.pool.capacity_cells,
        );
        let stats = Arc::new(ForwardStats::new());
        let worker = DispatchWorker::spawn(model, pool, stats);
        let handle = worker.handle();
        let seq_pool =
            Arc::new(SequencePool::new(cfg.pool.transient_slots, cfg.pool.session_slots));
        for id in seq_pool.all_ids() {
            handle.register_seq(Cause::Pool, id)?;
        }
        let driver_cfg = PoolDriverConfig {
            n_batch: cfg.scheduler.n_batch,
            pld: cfg.scheduler.pld.clone(),
            layers: cfg.model.layers,
            acquire_timeout: Duration::from_secs(30),
        };
        let pool_engine =
            PoolEngine::spawn(handle.clone(), Arc::clone(&seq_pool), driver_cfg, tokenizer.eos());
        Ok(Self {
            response_cache: Mutex::new(ResponseCache::new(cfg.caches.response_entries)),
            render_cache: Mutex::new(LruCache::new(cfg.caches.render_entries)),
            tokenize_cache: Mutex::new(LruCache::new(cfg.caches.tokenize_entries)),
            pool_engine,
            sessions: Mutex::new(HashMap::new()),
            handle,
            worker,
            seq_pool,
            next_session: AtomicU64::new(1),
            tokenizer,
            cfg,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn dispatch(&self) -> &DispatchHandle {
        &self.handle
    }

    pub fn pool_snapshot(&self) -> PoolSnapshot {
        self.pool_engine.snapshot()
    }

    // -- Sessions ----------------------------------------------------------

    pub fn create_session(&self, req: CreateSession) -> Result<u64> {
        let seq = self
            .seq_pool
            .acquire(SeqKind::Session, Duration::ZERO)
            .map_err(|_| EngineError::SessionQuota)?;
        let id = self.next_session.fetch_add(1, Ordering::SeqCst);
        let defaults = &self.cfg.session;
        let settings = SessionSettings {
            retention_tokens: req.retention_tokens.unwrap_or(defaults.retention_tokens),
            tau: req.tau.unwrap_or(defaults.tau),
            header_text: req.header_text.clone().unwrap_or_else(|| defaults.header_text.clone()),
            fast_vocab: req.fast_vocab.clone().unwrap_or_else(|| defaults.fast_vocab.clone()),
            flash_capacity: defaults.flash_capacity,
            default_max_tokens: defaults.default_max_tokens,
        };
        let bus = EventBus::new(id, self.cfg.server.event_replay, self.cfg.server.event_channel);
        let state = match session::create_session(
            &self.handle,
            &self.tokenizer,
            &settings,
            id,
            seq,
            &req.system_prompt,
            &req.flash_questions,
            &bus,
        ) {
            Ok(s) => s,
            Err(e) => {
                let _ = self.handle.seq_remove(Cause::Session, seq, 0);
                self.seq_pool.release(seq);
                return Err(e);
            }
        };
        let handle = Arc::new(SessionHandle {
            id,
            seq,
            turnstile: Turnstile::new(),
            state: Mutex::new(state),
            ring: RecordRing::new(self.cfg.ring.capacity),
            bus,
            stop: AtomicBool::new(false),
            work_mx: Mutex::new(()),
            work_cv: Condvar::new(),
            progress: Mutex::new(IngestProgress::default()),
            progress_cv: Condvar::new(),
            accepted_total: AtomicU64::new(0),
            skipped_total: AtomicU64::new(0),
        });
        let worker = {
            let sess = Arc::clone(&handle);
            let dispatch = self.handle.clone();
            let tokenizer = Arc::clone(&self.tokenizer);
            let batch = self.cfg.ring.batch_records;
            thread::Builder::new()
                .name(format!("ingest-{id}"))
                .spawn(move || ingest_worker(sess, dispatch, tokenizer, batch))
                .map_err(|e| EngineError::Internal(format!("spawn ingest worker: {e}")))?
        };
        self.sessions.lock().insert(id, SessionEntry { handle, worker: Some(worker) });
        Ok(id)
    }

    fn session(&self, id: u64) -> Result<Arc<SessionHandle>> {
        self.sessions
            .lock()
            .get(&id)
            .map(|e| Arc::clone(&e.handle))
            .ok_or(EngineError::UnknownSession(id))
    }

    pub fn delete_session(&self, id: u64) -> Result<()> {
        let mut entry =
            self.sessions.lock().remove(&id).ok_or(EngineError::UnknownSession(id))?;
        stop_ingest_worker(&entry.handle, &mut entry.worker);
        let _ = self.handle.seq_remove(Cause::Session, entry.handle.seq, 0);
        self.seq_pool.release(entry.handle.seq);
        Ok(())
    }

    /// Non-blocking data push: records enter the ring and the call returns
    /// before any ingestion happens. Empty or oversized records are skipped
    /// and counted.
    pub fn push_records(&self, id: u64, records: &[String]) -> Result<PushReport> {
        let sess = self.session(id)?;
        let mut accepted = 0u64;
        let mut skipped = 0u64;
        for r in records {
            if r.trim().is_empty() || r.len() > self.cfg.ring.max_record_chars {
                skipped += 1;
                continue;
            }
            sess.ring.push(r.clone());
            accepted += 1;
        }
        sess.accepted_total.fetch_add(accepted, Ordering::Relaxed);
        sess.skipped_total.fetch_add(skipped, Ordering::Relaxed);
        if accepted > 0 {
            let _g = sess.work_mx.lock();
            sess.work_cv.notify_all();
        }
        Ok(PushReport {
            accepted,
            skipped,
            dropped_total: sess.ring.dropped_total(),
            pending: sess.ring.pending() as u64,
        })
    }

    /// Blocks until the session's ring is drained and no ingestion turn is
    /// in flight. Surfaces the last ingestion error, if any.
    pub fn wait_idle(&self, id: u64, timeout: Duration) -> Result<u64> {
        let sess = self.session(id)?;
        let deadline = Instant::now() + timeout;
        let mut progress = sess.progress.lock();
        loop {
            if sess.ring.pending() == 0 && !progress.busy {
                if let Some(err) = progress.last_error.take() {
                    return Err(EngineError::Internal(format!("ingestion failed: {err}")));
                }
                return Ok(sess.state.lock().data_version);
            }
            if sess.progress_cv.wait_until(&mut progress, deadline).timed_out() {
                return Err(EngineError::Internal("timed out waiting for ingestion".into()));
            }
        }
    }

    pub fn query(
        &self,
        id: u64,
        q: &str,
        max_tokens: Option<usize>,
        allow_speculative: bool,
    ) -> Result<QueryOutcome> {
        let sess = self.session(id)?;
        let max = max_tokens.unwrap_or(self.cfg.session.default_max_tokens);
        let _turn = sess.turnstile.enter();
        let mut state = sess.state.lock();
        session::query(&mut state, &self.handle, &self.tokenizer, q, max, allow_speculative)
    }

    /// Registers a flash question. When the session is idle the whole
    /// registry is re-evaluated immediately; otherwise the next ingestion
    /// cycle picks it up.
    pub fn register_flash(&self, id: u64, question: &str) -> Result<(u64, bool)> {
        let sess = self.session(id)?;
        let _turn = sess.turnstile.enter();
        let mut state = sess.state.lock();
        let flash_id = state.flash.register(&self.tokenizer, question)?;
        let idle = sess.ring.pending() == 0;
        if idle {
            flash::evaluate_all(&mut state, &self.handle, &self.tokenizer, &sess.bus)?;
        }
        Ok((flash_id, idle))
    }

    pub fn subscribe_events(
        &self,
        id: u64,
        last_seen: Option<u64>,
    ) -> Result<(Vec<Event>, broadcast::Receiver<Event>)> {
        Ok(self.session(id)?.bus.subscribe(last_seen))
    }

    pub fn session_info(&self, id: u64) -> Result<SessionInfo> {
        let sess = self.session(id)?;
        let state = sess.state.lock();
        let layout = self.handle.with_pool(|p| p.region_layout(state.seq))?;
        Ok(SessionInfo {
            session_id: id,
            data_version: state.data_version,
            records_ingested: state.records_ingested,
            context_tokens: layout.frozen_tokens + layout.sliding_tokens + layout.ephemeral_tokens,
            layout,
            flash_registered: state.flash.len(),
            ring_pending: sess.ring.pending() as u64,
            ring_dropped_total: sess.ring.dropped_total(),
            paths: state.paths,
            seq: state.seq,
        })
    }

    /// KV bytes held by a session's sequence (2 * L * d * n_ctx * 4).
    pub fn session_kv_bytes(&self, id: u64) -> Result<u64> {
        let sess = self.session(id)?;
        let seq = sess.state.lock().seq;
        Ok(self.handle.with_pool(|p| p.kv_bytes(seq))?)
    }

    // -- Stateless completions ---------------------------------------------

    /// Tokenize with the small text-keyed LRU in front.
    pub fn tokenize_cached(&self, text: &str) -> Vec<TokenId> {
        let key = fnv1a64(text.as_bytes());
        if let Some(tokens) = self.tokenize_cache.lock().get(&key) {
            return tokens;
        }
        let tokens = self.tokenizer.tokenize(text);
        self.tokenize_cache.lock().put(key, tokens.clone());
        tokens
    }

    /// Minimal chat template, cached by (template, messages) hash.
    pub fn render_chat(&self, messages: &[ChatMessage]) -> String {
        let mut h = streamkv_core::hash::Fnv1a64::new();
        h.update(b"chat-v1");
        for m in messages {
            h.update(m.role.as_bytes());
            h.update(&[0]);
            h.update(m.content.as_bytes());
            h.update(&[0]);
        }
        let key = h.finish();
        if let Some(text) = self.render_cache.lock().get(&key) {
            return text;
        }
        let mut text = String::new();
        for m in messages {
            text.push_str(&m.role.to_uppercase());
            text.push_str(": ");
            text.push_str(&m.content);
            text.push(' ');
        }
        text.push_str("ASSISTANT:");
        self.render_cache.lock().put(key, text.clone());
        text
    }

    /// Stateless completion: response cache first (zero model work on a
    /// hit), then the slot/radix path through the pool driver.
    pub fn complete(&self, prompt: &str, max_tokens: usize) -> Result<CompletionResult> {
        let tokens = self.tokenize_cached(prompt);
        if let Some(entry) = self.response_cache.lock().get(&tokens) {
            return Ok(CompletionResult {
                text: entry.text,
                tokens: Vec::new(),
                seed: entry.seed,
                from_cache: true,
            });
        }
        let rx = self.pool_engine.submit(tokens.clone(), max_tokens);
        let out: CompletionOutput =
            rx.recv().map_err(|_| EngineError::Shutdown)??;
        let text = self.tokenizer.detokenize(&out.tokens);
        self.response_cache.lock().put(tokens, text.clone(), out.seed);
        Ok(CompletionResult { text, tokens: out.tokens, seed: out.seed, from_cache: false })
    }

    /// Batch variant used by equivalence sweeps: all prompts enter the
    /// driver's admission queue together.
    pub fn complete_batch(
        &self,
        prompts: &[(String, usize)],
    ) -> Vec<Result<CompletionResult>> {
        let mut cached: Vec<Option<CompletionResult>> = Vec::with_capacity(prompts.len());
        let mut submit: Vec<(Vec<TokenId>, usize)> = Vec::new();
        let mut submit_idx: Vec<usize> = Vec::new();
        for (i, (prompt, max_tokens)) in prompts.iter().enumerate() {
            let tokens = self.tokenize_cached(prompt);
            if let Some(entry) = self.response_cache.lock().get(&tokens) {
                cached.push(Some(CompletionResult {
                    text: entry.text,
                    tokens: Vec::new(),
                    seed: entry.seed,
                    from_cache: true,
                }));
            } else {
                cached.push(None);
                submit.push((tokens, *max_tokens));
                submit_idx.push(i);
            }
        }
        let receivers = self.pool_engine.submit_many(submit.clone());
        let mut results: Vec<Result<CompletionResult>> =
            cached.into_iter().map(|c| c.ok_or(EngineError::Shutdown)).collect();
        for ((rx, (tokens, _)), idx) in receivers.into_iter().zip(submit).zip(submit_idx) {
            let res = rx.recv().map_err(|_| EngineError::Shutdown).and_then(|r| r).map(|out| {
                let text = self.tokenizer.detokenize(&out.tokens);
                self.response_cache.lock().put(tokens, text.clone(), out.seed);
                CompletionResult { text, tokens: out.tokens, seed: out.seed, from_cache: false }
            });
            results[idx] = res;
        }
        results
    }

    /// Deterministic sampler seed for a prompt (exposed for stats/tests).
    pub fn prompt_seed(&self, prompt: &str) -> u32 {
        derive_seed(&self.tokenizer.tokenize(prompt))
    }

    // -- Stats ---------------------------------------------------------------

    pub fn stats(&self) -> EngineStats {
        let (used, capacity) = self.handle.occupancy();
        let sessions: Vec<SessionInfo> = {
            let ids: Vec<u64> = self.sessions.lock().keys().copied().collect();
            ids.iter().filter_map(|id| self.session_info(*id).ok()).collect()
        };
        let rc = self.response_cache.lock();
        let (rc_hits, rc_misses) = rc.counters();
        let render = self.render_cache.lock();
        let tok = self.tokenize_cache.lock();
        EngineStats {
            forwards: self.handle.stats().snapshot(),
            scheduler: self.handle.counters(),
            pool: self.pool_engine.snapshot(),
            occupancy_used: used,
            occupancy_capacity: capacity,
            response_cache: CacheCounters {
                entries: rc.len() as u64,
                hits: rc_hits,
                misses: rc_misses,
            },
            render_cache: CacheCounters {
                entries: render.len() as u64,
                hits: render.hits,
                misses: render.misses,
            },
            tokenize_cache: CacheCounters {
                entries: tok.len() as u64,
                hits: tok.hits,
                misses: tok.misses,
            },
            sessions,
        }
    }

    pub fn shutdown(&mut self) {
        let ids: Vec<u64> = self.sessions.lock().keys().copied().collect();
        for id in ids {
            let _ = self.delete_session(id);
        }
        self.pool_engine.shutdown();
        self.worker.shutdown();
    }
}

fn stop_ingest_worker(sess: &Arc<SessionHandle>, worker: &mut Option<thread::JoinHandle<()>>) {
    {
        let _g = sess.work_mx.lock();
        sess.stop.store(true, Ordering::SeqCst);
    }
    sess.work_cv.notify_all();
    if let Some(t) = worker.take() {
        let _ = t.join();
    }
}

/// Per-session ingestion worker: drains the ring in batches, runs the
/// ingestion turn (eviction, append, version bump, flash refresh), then
/// publishes progress and a stats event.
fn ingest_worker(
    sess: Arc<SessionHandle>,
    dispatch: DispatchHandle,
    tokenizer: Arc<Tokenizer>,
    batch_records: usize,
) {
    loop {
        {
            let mut g = sess.work_mx.lock();
            while !sess.stop.load(Ordering::SeqCst) && sess.ring.pending() == 0 {
                sess.work_cv.wait(&mut g);
            }
        }
        if sess.stop.load(Ordering::SeqCst) {
            return;
        }
        sess.progress.lock().busy = true;
        let batch = sess.ring.drain(batch_records);
        if !batch.is_empty() {
            let turn = sess.turnstile.enter();
            let mut state = sess.state.lock();
            let result = session::ingest_batch(
                &mut state,
                &dispatch,
                &tokenizer,
                &sess.bus,
                &batch,
                sess.ring.dropped_total(),
            );
            let version = state.data_version;
            drop(state);
            drop(turn);
            match result {
                Ok(_report) => {
                    let (used, capacity) = dispatch.occupancy();
                    sess.bus.emit(
                        version,
                        EventKind::Stats {
                            used_cells: used,
                            capacity_cells: capacity,
                            ring_pending: sess.ring.pending() as u64,
                            ring_dropped_total: sess.ring.dropped_total(),
                        },
                    );
                }
                Err(e) => {
                    sess.progress.lock().last_error = Some(e.to_string());
                }
            }
        }
        {
            let mut p = sess.progress.lock();
            p.records_ingested += batch.len() as u64;
            p.batches += 1;
            p.busy = false;
        }
        sess.progress_cv.notify_all();
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::QueryPath;

    fn engine() -> Engine {
        Engine::new(ServiceConfig::default()).unwrap()
    }

    fn records(n: usize, base: usize) -> Vec<String> {
        (0..n)
            .map(|i| {
                let i = i + base;
                format!(
                    "O {:02} H {:02} L {:02} C {:02} V {:02} ;",
                    10 + i % 80,
                    12 + i % 80,
                    10 + i % 80,
                    11 + i % 80,
                    10 + (i * 7) % 80
                )
            })
            .collect()
    }

    #[test]
    fn session_lifecycle_push_query() {
        let eng = engine();
        let id = eng
            .create_session(CreateSession {
                system_prompt: "O H L C V".into(),
                ..Default::default()
            })
            .unwrap();
        let report = eng.push_records(id, &records(5, 0)).unwrap();
        assert_eq!(report.accepted, 5);
        let version = eng.wait_idle(id, Duration::from_secs(10)).unwrap();
        assert!(version >= 1);
        let out = eng.query(id, "UP or DOWN ?", Some(4), false).unwrap();
        assert_eq!(out.path, QueryPath::Standard);
        let info = eng.session_info(id).unwrap();
        assert_eq!(info.records_ingested, 5);
        eng.delete_session(id).unwrap();
        assert!(matches!(eng.query(id, "x", None, false), Err(EngineError::UnknownSession(_))));
    }

    #[test]
    fn unknown_session_everywhere() {
        let eng = engine();
        assert!(matches!(eng.push_records(9, &[]), Err(EngineError::UnknownSession(9))));
        assert!(matches!(eng.session_info(9), Err(EngineError::UnknownSession(9))));
        assert!(matches!(eng.delete_session(9), Err(EngineError::UnknownSession(9))));
    }

    #[test]
    fn malformed_records_are_skipped_and_counted() {
        let eng = engine();
        let id = eng.create_session(CreateSession::default()).unwrap();
        let big = "x".repeat(eng.config().ring.max_record_chars + 1);
        let report = eng
            .push_records(id, &["".into(), "   ".into(), big, "O 10 H 12 L 10 C 11 V 30 ;".into()])
            .unwrap();
        assert_eq!(report.accepted, 1);
        assert_eq!(report.skipped, 3);
    }

    #[test]
    fn flash_registration_idle_evaluates_immediately() {
        let eng = engine();
        let id = eng.create_session(CreateSession::default()).unwrap();
        let (_fid, evaluated) = eng.register_flash(id, "what is the trend ?").unwrap();
        assert!(evaluated, "idle session evaluates at registration");
        let out = eng.query(id, "what is the trend ?", None, false).unwrap();
        assert_eq!(out.path, QueryPath::FlashHit);
        assert_eq!(out.query_tokens + out.generated_tokens, 0);
    }

    #[test]
    fn session_quota_is_enforced() {
        let mut cfg = ServiceConfig::default();
        cfg.pool.session_slots = 1;
        let eng = Engine::new(cfg).unwrap();
        let _a = eng.create_session(CreateSession::default()).unwrap();
        assert!(matches!(
            eng.create_session(CreateSession::default()),
            Err(EngineError::SessionQuota)
        ));
    }

    #[test]
    fn stateless_completion_determinism_and_cache() {
        let eng = engine();
        let prompt = "O 10 H 12 L 10 C 11 V 30 ; UP or DOWN";
        let before = eng.dispatch().stats().snapshot();
        let a = eng.complete(prompt, 6).unwrap();
        assert!(!a.from_cache);
        let mid = eng.dispatch().stats().snapshot();
        let b = eng.complete(prompt, 6).unwrap();
        let after = eng.dispatch().stats().snapshot();
        assert!(b.from_cache);
        assert_eq!(a.text, b.text, "byte-identical responses");
        assert!(mid.pool.total() > before.pool.total());
        assert_eq!(after.pool.total(), mid.pool.total(), "cache hit does zero model work");
        assert_eq!(a.seed, eng.prompt_seed(prompt));
    }

    #[test]
    fn stateless_and_session_planes_are_isolated() {
        let eng = engine();
        let id = eng
            .create_session(CreateSession { system_prompt: "O H".into(), ..Default::default() })
            .unwrap();
        let seq = eng.session_info(id).unwrap().seq;
        let digest_before = eng.dispatch().digest(seq).unwrap();
        eng.complete("YES or NO", 4).unwrap();
        assert_eq!(
            eng.dispatch().digest(seq).unwrap(),
            digest_before,
            "stateless traffic never touches session sequences"
        );
        // And session traffic leaves the transient pool alone.
        let free_before = eng.seq_pool.free_count(SeqKind::Transient);
        eng.query(id, "UP ?", Some(2), false).unwrap();
        assert_eq!(eng.seq_pool.free_count(SeqKind::Transient), free_before);
    }

    #[test]
    fn render_chat_is_cached() {
        let eng = engine();
        let messages = vec![
            ChatMessage { role: "system".into(), content: "O H L".into() },
            ChatMessage { role: "user".into(), content: "UP ?".into() },
        ];
        let a = eng.render_chat(&messages);
        let b = eng.render_chat(&messages);
        assert_eq!(a, b);
        assert_eq!(a, "SYSTEM: O H L USER: UP ? ASSISTANT:");
        let stats = eng.stats();
        assert_eq!(stats.render_cache.hits, 1);
        assert_eq!(stats.render_cache.entries, 1);
    }

    #[test]
    fn events_flow_end_to_end() {
        let eng = engine();
        let id = eng
            .create_session(CreateSession {
                flash_questions: vec!["trend UP or DOWN ?".into()],
                ..Default::default()
            })
            .unwrap();
        let (_, mut rx) = eng.subscribe_events(id, None).unwrap();
        eng.push_records(id, &records(2, 0)).unwrap();
        eng.wait_idle(id, Duration::from_secs(10)).unwrap();
        let mut names = Vec::new();
        while let Ok(e) = rx.try_recv() {
            names.push(e.kind.name());
        }
        assert_eq!(names, vec!["data_updated", "flash_ready", "stats"]);
    }
}
