//! Persistent sessions: region layout, incremental ingestion, query
//! processing with flash dispatch and ready-position speculative exit, and
//! header pre-decode.
//!
//! A session's sequence is laid out as `[frozen | sliding | header |
//! query/response]`. The header is pre-decoded response scaffolding living
//! at `header_pos`; ingestion strips it, appends the new data tokens in its
//! place, and re-decodes it at the shifted position, which also refreshes
//! the ready-position logits used for speculative exit. Query tokens go
//! after the header and are removed when the query completes, so the
//! sequence digest is identical before and after any query.

use crate::dispatch::DispatchHandle;
use crate::error::{EngineError, Result};
use crate::events::{EventBus, EventKind};
use crate::flash::{self, FlashRegistry};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use streamkv_core::{greedy_sample, Cause, Logits, Phase, RegionTag, SequenceId, TokenId, Tokenizer};

/// Per-session tuning, from the service config and the creation payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSettings {
    /// Sliding-region budget in tokens; the Region-1 "capacity" of the
    /// ingestion eviction guard.
    pub retention_tokens: u64,
    /// Logit-gap threshold for speculative exit.
    pub tau: f32,
    /// Pre-decoded response header text.
    pub header_text: String,
    /// Fast-answer vocabulary for speculative exit.
    pub fast_vocab: Vec<String>,
    /// Registered flash query cap.
    pub flash_capacity: usize,
    /// Default generation budget per query.
    pub default_max_tokens: usize,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            retention_tokens: 16_384,
            tau: 2.0,
            header_text: "ANSWER:".to_string(),
            fast_vocab: vec!["UP".into(), "DOWN".into(), "YES".into(), "NO".into()],
            flash_capacity: 64,
            default_max_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryPath {
    FlashHit,
    SpecExit,
    Standard,
}

impl QueryPath {
    pub fn name(&self) -> &'static str {
        match self {
            QueryPath::FlashHit => "FLASH_HIT",
            QueryPath::SpecExit => "SPEC_EXIT",
            QueryPath::Standard => "STANDARD",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryOutcome {
    pub text: String,
    pub path: QueryPath,
    pub data_version: u64,
    pub query_tokens: u64,
    pub generated_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct ReadyLogits {
    pub logits: Logits,
    pub version: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PathCounts {
    pub flash_hit: u64,
    pub spec_exit: u64,
    pub standard: u64,
}

pub struct SessionState {
    pub session_id: u64,
    pub seq: SequenceId,
    /// First position after the frozen region.
    pub frozen_end: u32,
    /// Header position `p`; the sliding region is [frozen_end, header_pos).
    pub header_pos: u32,
    pub header_tokens: Vec<TokenId>,
    pub header_present: bool,
    pub data_version: u64,
    pub ready_logits: Option<ReadyLogits>,
    /// Live (non-evicted) sliding tokens.
    pub sliding_live: u64,
    pub retention_tokens: u64,
    pub tau: f32,
    pub fast_vocab: HashSet<TokenId>,
    pub flash: FlashRegistry,
    pub records_ingested: u64,
    pub paths: PathCounts,
    pub eos: TokenId,
}

impl SessionState {
    /// First position after the header; ephemeral query tokens start here.
    pub fn header_end(&self) -> u32 {
        self.header_pos + if self.header_present { self.header_tokens.len() as u32 } else { 0 }
    }
}

/// Tokenizes the configured fast-answer vocabulary; every entry must be a
/// single token so the exit can answer with one table lookup.
fn fast_vocab_tokens(tokenizer: &Tokenizer, words: &[String]) -> Result<HashSet<TokenId>> {
    let mut set = HashSet::new();
    for w in words {
        let toks = tokenizer.tokenize(w);
        if toks.len() != 1 {
            return Err(EngineError::InvalidConfig(format!(
                "fast vocabulary entry {w:?} is not a single token"
            )));
        }
        set.insert(toks[0]);
    }
    Ok(set)
}

/// Initializes a session: system prompt forwarded once into the frozen
/// region, header pre-decoded, flash questions registered and evaluated.
pub fn create_session(
    handle: &DispatchHandle,
    tokenizer: &Tokenizer,
    settings: &SessionSettings,
    session_id: u64,
    seq: SequenceId,
    system_prompt: &str,
    flash_questions: &[String],
    bus: &EventBus,
) -> Result<SessionState> {
    let header_tokens = tokenizer.tokenize(&settings.header_text);
    if header_tokens.is_empty() {
        return Err(EngineError::EmptyHeader);
    }
    let prompt_tokens = tokenizer.tokenize(system_prompt);
    let frozen_end = prompt_tokens.len() as u32;
    let mut state = SessionState {
        session_id,
        seq,
        frozen_end,
        header_pos: frozen_end,
        header_tokens,
        header_present: false,
        data_version: 0,
        ready_logits: None,
        sliding_live: 0,
        retention_tokens: settings.retention_tokens,
        tau: settings.tau,
        fast_vocab: fast_vocab_tokens(tokenizer, &settings.fast_vocab)?,
        flash: FlashRegistry::new(settings.flash_capacity),
        records_ingested: 0,
        paths: PathCounts::default(),
        eos: tokenizer.eos(),
    };
    if !prompt_tokens.is_empty() {
        handle.forward_last(
            Cause::Session,
            seq,
            0,
            prompt_tokens,
            RegionTag::Frozen,
            Phase::Prefill,
        )?;
    }
    predecode_header(&mut state, handle, Cause::Session)?;
    for q in flash_questions {
        state.flash.register(tokenizer, q)?;
    }
    if !state.flash.is_empty() {
        flash::evaluate_all(&mut state, handle, tokenizer, bus)?;
    }
    Ok(state)
}

/// Report of one ingestion turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub data_version: u64,
    pub batch_tokens: u64,
    pub evicted_tokens: u64,
    pub records: u64,
}

/// Ingests one batch of records: eviction guard, strip header, append data
/// under STREAM, bump the data version, emit `data_updated`, then refresh
/// flash answers (or just the header when no queries are registered).
pub fn ingest_batch(
    state: &mut SessionState,
    handle: &DispatchHandle,
    tokenizer: &Tokenizer,
    bus: &EventBus,
    records: &[String],
    ring_dropped_total: u64,
) -> Result<IngestReport> {
    let mut batch_tokens: Vec<TokenId> = Vec::new();
    for r in records {
        batch_tokens.extend(tokenizer.tokenize(r));
    }
    if batch_tokens.is_empty() {
        return Ok(IngestReport {
            data_version: state.data_version,
            batch_tokens: 0,
            evicted_tokens: 0,
            records: 0,
        });
    }
    let n = batch_tokens.len() as u64;
    if n > state.retention_tokens {
        return Err(EngineError::BatchExceedsRetention {
            batch_tokens: n,
            retention: state.retention_tokens,
        });
    }
    // Eviction guard: free exactly one batch worth of the oldest sliding
    // tokens when the retention window would overflow.
    let mut evicted = 0u64;
    if state.sliding_live + n > state.retention_tokens {
        let gone = handle.evict_oldest(Cause::Stream, state.seq, n)?;
        evicted = gone.len() as u64;
        state.sliding_live -= evicted;
    }
    if state.header_present {
        handle.seq_remove(Cause::Stream, state.seq, state.header_pos)?;
        state.header_present = false;
    }
    handle.forward_last(
        Cause::Stream,
        state.seq,
        state.header_pos,
        batch_tokens,
        RegionTag::Sliding,
        Phase::Prefill,
    )?;
    state.header_pos += n as u32;
    state.sliding_live += n;
    state.data_version += 1;
    state.records_ingested += records.len() as u64;
    bus.emit(
        state.data_version,
        EventKind::DataUpdated { records: records.len() as u64, dropped_total: ring_dropped_total },
    );
    if state.flash.is_empty() {
        predecode_header(state, handle, Cause::Stream)?;
    } else {
        flash::evaluate_all(state, handle, tokenizer, bus)?;
    }
    Ok(IngestReport {
        data_version: state.data_version,
        batch_tokens: n,
        evicted_tokens: evicted,
        records: records.len() as u64,
    })
}

/// Forwards the header tokens at `header_pos` and caches the resulting
/// ready-position logits, stamped with the current data version.
pub fn predecode_header(
    state: &mut SessionState,
    handle: &DispatchHandle,
    cause: Cause,
) -> Result<Logits> {
    if state.header_tokens.is_empty() {
        return Err(EngineError::EmptyHeader);
    }
    if state.header_present {
        handle.seq_remove(cause, state.seq, state.header_pos)?;
        state.header_present = false;
    }
    let logits = handle.forward_last(
        cause,
        state.seq,
        state.header_pos,
        state.header_tokens.clone(),
        RegionTag::Ephemeral,
        Phase::Prefill,
    )?;
    state.header_present = true;
    state.ready_logits =
        Some(ReadyLogits { logits: logits.clone(), version: state.data_version });
    Ok(logits)
}

/// Answers a query. Dispatch order is total: flash cache, then speculative
/// exit from the ready-position logits, then the standard decode path.
pub fn query(
    state: &mut SessionState,
    handle: &DispatchHandle,
    tokenizer: &Tokenizer,
    q: &str,
    max_tokens: usize,
    allow_speculative: bool,
) -> Result<QueryOutcome> {
    // (1) Flash cache: zero model work on a fresh hit.
    if let Some(entry) = state.flash.lookup(q, state.data_version) {
        state.paths.flash_hit += 1;
        return Ok(QueryOutcome {
            text: entry.answer_text.clone(),
            path: QueryPath::FlashHit,
            data_version: state.data_version,
            query_tokens: 0,
            generated_tokens: 0,
        });
    }
    // (2) Speculative exit: answered from the ready-position logits before
    // any tokenization, when the model is confident and the top token is a
    // fast answer. Opt-out per query because the question text is ignored.
    if allow_speculative {
        if let Some(ready) = &state.ready_logits {
            if ready.version == state.data_version {
                let (top, gap) = greedy_sample(&ready.logits);
                if gap > state.tau && state.fast_vocab.contains(&top) {
                    state.paths.spec_exit += 1;
                    return Ok(QueryOutcome {
                        text: tokenizer.detokenize_one(top),
                        path: QueryPath::SpecExit,
                        data_version: state.data_version,
                        query_tokens: 0,
                        generated_tokens: 0,
                    });
                }
            }
        }
    }
    // (3) Standard path: forward the question at the ephemeral region,
    // greedy-decode, then clear the ephemeral range.
    let q_tokens = tokenizer.tokenize(q);
    if q_tokens.is_empty() {
        return Err(EngineError::EmptyQuery);
    }
    let start = state.header_end();
    let q_len = q_tokens.len() as u64;
    let result = standard_decode(state, handle, q_tokens, start, max_tokens);
    // Ephemeral hygiene even on failure.
    let cleanup = handle.seq_remove(Cause::Session, state.seq, start);
    let generated = result?;
    cleanup?;
    state.paths.standard += 1;
    Ok(QueryOutcome {
        text: tokenizer.detokenize(&generated),
        path: QueryPath::Standard,
        data_version: state.data_version,
        query_tokens: q_len,
        generated_tokens: generated.len() as u64,
    })
}

/// Greedy decode until EOS or the budget; every emitted token is forwarded,
/// so SESSION-cause tokens are exactly |query| + |generated|.
fn standard_decode(
    state: &SessionState,
    handle: &DispatchHandle,
    q_tokens: Vec<TokenId>,
    start: u32,
    max_tokens: usize,
) -> Result<Vec<TokenId>> {
    let q_len = q_tokens.len() as u32;
    let mut logits = handle.forward_last(
        Cause::Session,
        state.seq,
        start,
        q_tokens,
        RegionTag::Ephemeral,
        Phase::Prefill,
    )?;
    let mut out = Vec::new();
    let mut pos = start + q_len;
    while out.len() < max_tokens {
        let (tok, _) = greedy_sample(&logits);
        if tok == state.eos {
            break;
        }
        logits = handle.forward_last(
            Cause::Session,
            state.seq,
            pos,
            vec![tok],
            RegionTag::Ephemeral,
            Phase::Decode,
        )?;
        out.push(tok);
        pos += 1;
    }
    Ok(out)
}
