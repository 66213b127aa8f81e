//! Ahead-of-time evaluation of registered questions.
//!
//! After each ingestion batch the session's idle turn evaluates every
//! registered question in place: strip the pre-decoded header, forward the
//! question tokens at the header position, sample one greedy answer with
//! its logit gap, clear the question, and after the last question re-decode
//! the header once (amortized across all questions), which also refreshes
//! the ready-position logits. The sequence digest is identical before and
//! after a full evaluation cycle.

use crate::dispatch::DispatchHandle;
use crate::error::{EngineError, Result};
use crate::events::{EventBus, EventKind};
use crate::session::{predecode_header, SessionState};
use std::collections::HashMap;
use std::time::{Duration, Instant};
use streamkv_core::hash::fnv1a64;
use streamkv_core::{greedy_sample, Cause, Phase, RegionTag, TokenId, Tokenizer};

/// One registered question.
#[derive(Debug, Clone)]
pub struct FlashQuery {
    pub id: u64,
    pub question: String,
    pub tokens: Vec<TokenId>,
    pub norm_hash: u64,
}

/// Pre-computed answer at a data version. Valid only while the session's
/// data version still equals `version`.
#[derive(Debug, Clone)]
pub struct FlashCacheEntry {
    pub flash_id: u64,
    pub answer_token: TokenId,
    pub answer_text: String,
    pub gap: f32,
    pub version: u64,
    pub evaluated_at: Instant,
}

/// Question normalization rule behind `h(q) = h(f_i)`: trim, collapse
/// internal whitespace, case-fold.
pub fn normalize_question(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn question_hash(q: &str) -> u64 {
    fnv1a64(normalize_question(q).as_bytes())
}

pub struct FlashRegistry {
    capacity: usize,
    queries: Vec<FlashQuery>,
    by_hash: HashMap<u64, u64>,
    entries: HashMap<u64, FlashCacheEntry>,
    next_id: u64,
}

impl FlashRegistry {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            queries: Vec::new(),
            by_hash: HashMap::new(),
            entries: HashMap::new(),
            next_id: 0,
        }
    }

    /// Registers a question; duplicate normalized questions coalesce to the
    /// existing id.
    pub fn register(&mut self, tokenizer: &Tokenizer, question: &str) -> Result<u64> {
        if normalize_question(question).is_empty() {
            return Err(EngineError::EmptyQuestion);
        }
        let hash = question_hash(question);
        if let Some(&id) = self.by_hash.get(&hash) {
            return Ok(id);
        }
        if self.queries.len() >= self.capacity {
            return Err(EngineError::RegistryFull { cap: self.capacity });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.queries.push(FlashQuery {
            id,
            question: question.to_string(),
            tokens: tokenizer.tokenize(question),
            norm_hash: hash,
        });
        self.by_hash.insert(hash, id);
        Ok(id)
    }

    /// Cache hit iff the normalized hash matches a registered question and
    /// the entry was evaluated at exactly `current_version`.
    pub fn lookup(&self, question: &str, current_version: u64) -> Option<&FlashCacheEntry> {
        let id = *self.by_hash.get(&question_hash(question))?;
        let entry = self.entries.get(&id)?;
        (entry.version == current_version).then_some(entry)
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn queries(&self) -> &[FlashQuery] {
        &self.queries
    }

    pub fn entry(&self, flash_id: u64) -> Option<&FlashCacheEntry> {
        self.entries.get(&flash_id)
    }

    fn store(&mut self, entry: FlashCacheEntry) {
        self.entries.insert(entry.flash_id, entry);
    }
}

/// Evaluates every registered question against the current cache state.
/// Zero work when nothing is registered. Exactly one `flash_ready` event
/// per (question, version); FLASH-cause tokens per cycle are the sum of
/// question lengths plus one header re-decode.
pub fn evaluate_all(
    state: &mut SessionState,
    handle: &DispatchHandle,
    tokenizer: &Tokenizer,
    bus: &EventBus,
) -> Result<Vec<FlashCacheEntry>> {
    if state.flash.is_empty() {
        return Ok(Vec::new());
    }
    let p = state.header_pos;
    let seq = state.seq;
    if state.header_present {
        handle.seq_remove(Cause::Flash, seq, p)?;
        state.header_present = false;
    }
    let queries: Vec<(u64, String, Vec<TokenId>)> = state
        .flash
        .queries()
        .iter()
        .map(|q| (q.id, q.question.clone(), q.tokens.clone()))
        .collect();
    let mut out = Vec::with_capacity(queries.len());
    for (id, question, tokens) in queries {
        let evaluated = (|| -> Result<FlashCacheEntry> {
            let logits = handle.forward_last(
                Cause::Flash,
                seq,
                p,
                tokens,
                RegionTag::Ephemeral,
                Phase::Prefill,
            )?;
            let (answer, gap) = greedy_sample(&logits);
            handle.seq_remove(Cause::Flash, seq, p)?;
            Ok(FlashCacheEntry {
                flash_id: id,
                answer_token: answer,
                answer_text: tokenizer.detokenize_one(answer),
                gap,
                version: state.data_version,
                evaluated_at: Instant::now(),
            })
        })();
        match evaluated {
            Ok(entry) => {
                bus.emit(
                    state.data_version,
                    EventKind::FlashReady {
                        flash_id: entry.flash_id,
                        question,
                        answer: entry.answer_text.clone(),
                        confidence: entry.gap,
                    },
                );
                state.flash.store(entry.clone());
                out.push(entry);
            }
            Err(e) => {
                // Partial failure: put the header back before surfacing.
                let _ = handle.seq_remove(Cause::Flash, seq, p);
                let _ = predecode_header(state, handle, Cause::Flash);
                return Err(e);
            }
        }
    }
    predecode_header(state, handle, Cause::Flash)?;
    Ok(out)
}

/// Sustainable registered-question count for a data cadence:
/// floor((t_data - t_ingest - t_header) / t_f), clamped at zero.
pub fn k_max(t_data: Duration, t_ingest: Duration, t_header: Duration, t_f: Duration) -> u64 {
    assert!(!t_f.is_zero(), "per-question evaluation time must be positive");
    let spent = t_ingest + t_header;
    match t_data.checked_sub(spent) {
        None => 0,
        Some(idle) => (idle.as_nanos() / t_f.as_nanos()) as u64,
    }
}
