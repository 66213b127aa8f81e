//! Stateless completion execution: admit-many / run-few iterations over a
//! set of transient slots. Each iteration admits pending requests under the
//! cell budget, plans prefill chunks (grouped by shared prefix), and steps
//! every decoding slot by one committed token plus verified prompt-lookup
//! drafts. All model work and cache surgery goes through the dispatch
//! worker at POOL priority, one batch per item, so higher classes preempt
//! at batch boundaries.

use crate::dispatch::DispatchHandle;
use crate::error::{EngineError, Result};
use crate::planner::{
    self, c_budget, chunk_size, group_prefills, over_high_water, projected_cells, PldConfig,
};
use crate::poolcache::{derive_seed, RadixCache, RadixStats, SequencePool};
use parking_lot::{Condvar, Mutex};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;
use streamkv_core::{greedy_sample, Cause, Phase, RegionTag, SeqKind, SequenceId, TokenId};

#[derive(Debug, Clone)]
pub struct PoolDriverConfig {
    pub n_batch: usize,
    pub pld: PldConfig,
    pub layers: usize,
    /// Deadline for a pending request to obtain a slot.
    pub acquire_timeout: Duration,
}

impl Default for PoolDriverConfig {
    fn default() -> Self {
        Self {
            n_batch: 1024,
            pld: PldConfig::default(),
            layers: 4,
            acquire_timeout: Duration::from_secs(30),
        }
    }
}

pub struct CompletionRequest {
    pub prompt: Vec<TokenId>,
    pub max_tokens: usize,
    pub reply: mpsc::SyncSender<Result<CompletionOutput>>,
}

#[derive(Debug, Clone)]
pub struct CompletionOutput {
    pub tokens: Vec<TokenId>,
    pub seed: u32,
}

struct Slot {
    seq: SequenceId,
    prompt: Vec<TokenId>,
    cursor: usize,
    max_tokens: usize,
    generated: Vec<TokenId>,
    /// Sampled but not yet forwarded next token.
    pending: Option<TokenId>,
    /// Set when prefill completed via aliasing and the slot still needs its
    /// decode-start logits.
    needs_bootstrap: bool,
    acceptance_ema: f32,
    projected: u64,
    done: bool,
    replied: bool,
    reply: mpsc::SyncSender<Result<CompletionOutput>>,
}

impl Slot {
    fn prefilling(&self) -> bool {
        !self.done && self.cursor < self.prompt.len()
    }

    fn decoding(&self) -> bool {
        !self.done && self.cursor == self.prompt.len()
    }
}

#[derive(Debug, Default)]
pub struct PoolCounters {
    pub completions: AtomicU64,
    pub sizing_errors: AtomicU64,
    pub deferred_iterations: AtomicU64,
    pub drafted_tokens: AtomicU64,
    pub accepted_tokens: AtomicU64,
    pub grouped_followers: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct PoolSnapshot {
    pub completions: u64,
    pub sizing_errors: u64,
    pub deferred_iterations: u64,
    pub drafted_tokens: u64,
    pub accepted_tokens: u64,
    pub grouped_followers: u64,
    pub pending_requests: u64,
    pub radix: RadixStats,
}

struct PoolShared {
    handle: DispatchHandle,
    seq_pool: Arc<SequencePool>,
    radix: Mutex<RadixCache>,
    cfg: PoolDriverConfig,
    inbox: Mutex<VecDeque<CompletionRequest>>,
    cv: Condvar,
    shutdown: AtomicBool,
    next_pin: AtomicU64,
    counters: PoolCounters,
    eos: TokenId,
}

/// Owner of the pool driver thread.
pub struct PoolEngine {
    shared: Arc<PoolShared>,
    driver: Option<thread::JoinHandle<()>>,
}

impl PoolEngine {
    pub fn spawn(
        handle: DispatchHandle,
        seq_pool: Arc<SequencePool>,
        cfg: PoolDriverConfig,
        eos: TokenId,
    ) -> Self {
        let shared = Arc::new(PoolShared {
            handle,
            seq_pool,
            radix: Mutex::new(RadixCache::new()),
            cfg,
            inbox: Mutex::new(VecDeque::new()),
            cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
            // Pin ids live outside the pre-created slot id ranges.
            next_pin: AtomicU64::new(2_000_000),
            counters: PoolCounters::default(),
            eos,
        });
        let driver_shared = Arc::clone(&shared);
        let driver = thread::Builder::new()
            .name("pool-driver".into())
            .spawn(move || driver_loop(driver_shared))
            .expect("spawn pool driver");
        Self { shared, driver: Some(driver) }
    }

    /// Enqueues a completion; the returned receiver yields the result.
    pub fn submit(
        &self,
        prompt: Vec<TokenId>,
        max_tokens: usize,
    ) -> mpsc::Receiver<Result<CompletionOutput>> {
        self.submit_many(vec![(prompt, max_tokens)]).pop().unwrap()
    }

    /// Enqueues a batch atomically so the driver sees all of it in one
    /// admission round (concurrent arrivals group and batch together).
    pub fn submit_many(
        &self,
        requests: Vec<(Vec<TokenId>, usize)>,
    ) -> Vec<mpsc::Receiver<Result<CompletionOutput>>> {
        let mut receivers = Vec::with_capacity(requests.len());
        let shutdown = self.shared.shutdown.load(Ordering::SeqCst);
        let mut inbox = self.shared.inbox.lock();
        for (prompt, max_tokens) in requests {
            let (tx, rx) = mpsc::sync_channel(1);
            if shutdown {
                let _ = tx.send(Err(EngineError::Shutdown));
            } else {
                inbox.push_back(CompletionRequest { prompt, max_tokens, reply: tx });
            }
            receivers.push(rx);
        }
        drop(inbox);
        self.shared.cv.notify_all();
        receivers
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        let c = &self.shared.counters;
        PoolSnapshot {
            completions: c.completions.load(Ordering::Relaxed),
            sizing_errors: c.sizing_errors.load(Ordering::Relaxed),
            deferred_iterations: c.deferred_iterations.load(Ordering::Relaxed),
            drafted_tokens: c.drafted_tokens.load(Ordering::Relaxed),
            accepted_tokens: c.accepted_tokens.load(Ordering::Relaxed),
            grouped_followers: c.grouped_followers.load(Ordering::Relaxed),
            pending_requests: self.shared.inbox.lock().len() as u64,
            radix: self.shared.radix.lock().stats(),
        }
    }

    pub fn shutdown(&mut self) {
        {
            let _g = self.shared.inbox.lock();
            self.shared.shutdown.store(true, Ordering::SeqCst);
        }
        self.shared.cv.notify_all();
        if let Some(t) = self.driver.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PoolEngine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn driver_loop(shared: Arc<PoolShared>) {
    let mut slots: Vec<Slot> = Vec::new();
    let mut pending: VecDeque<CompletionRequest> = VecDeque::new();
    let mut committed_cells: u64 = 0;
    loop {
        // Collect new arrivals; park when fully idle.
        {
            let mut inbox = shared.inbox.lock();
            loop {
                while let Some(req) = inbox.pop_front() {
                    pending.push_back(req);
                }
                if shared.shutdown.load(Ordering::SeqCst) {
                    drop(inbox);
                    for req in pending.drain(..) {
                        let _ = req.reply.send(Err(EngineError::Shutdown));
                    }
                    for slot in slots.drain(..) {
                        if !slot.replied {
                            let _ = slot.reply.send(Err(EngineError::Shutdown));
                        }
                        let _ = shared.handle.seq_remove(Cause::Pool, slot.seq, 0);
                        shared.seq_pool.release(slot.seq);
                    }
                    return;
                }
                if !pending.is_empty() || !slots.is_empty() {
                    break;
                }
                shared.cv.wait(&mut inbox);
            }
        }

        admit(&shared, &mut pending, &mut slots, &mut committed_cells);
        let deferred = run_prefill_iteration(&shared, &mut slots);
        if deferred {
            shared.counters.deferred_iterations.fetch_add(1, Ordering::Relaxed);
        }
        run_decode_iteration(&shared, &mut slots);
        finish_slots(&shared, &mut slots, &mut committed_cells);
    }
}

fn admit(
    shared: &PoolShared,
    pending: &mut VecDeque<CompletionRequest>,
    slots: &mut Vec<Slot>,
    committed_cells: &mut u64,
) {
    let budget = c_budget(shared.handle.occupancy().1);
    while let Some(req) = pending.front() {
        let projected = projected_cells(req.prompt.len(), req.max_tokens, shared.cfg.layers);
        if projected > budget {
            // A single request that can never fit is a sizing error, not a
            // deferral: fail it rather than wedging the queue.
            let req = pending.pop_front().unwrap();
            shared.counters.sizing_errors.fetch_add(1, Ordering::Relaxed);
            let _ = req
                .reply
                .send(Err(EngineError::RequestTooLarge { needed_cells: projected, budget }));
            continue;
        }
        if *committed_cells + projected > budget {
            break; // Deferred, admission stays in arrival order.
        }
        let Ok(seq) = shared.seq_pool.acquire(SeqKind::Transient, Duration::ZERO) else {
            break; // No free slot; retry next iteration.
        };
        let req = pending.pop_front().unwrap();
        let mut slot = Slot {
            seq,
            cursor: 0,
            max_tokens: req.max_tokens,
            generated: Vec::new(),
            pending: None,
            needs_bootstrap: false,
            acceptance_ema: 1.0,
            projected,
            done: false,
            replied: false,
            reply: req.reply,
            prompt: req.prompt,
        };
        // Restore the longest cached prefix, keeping at least one prompt
        // token to prefill so the decode-start logits come from a real
        // forward pass.
        let m = shared.radix.lock().lookup(&slot.prompt);
        if let Some(donor) = m.donor {
            let alias_len = m.len.min(slot.prompt.len().saturating_sub(1)) as u64;
            if alias_len > 0
                && shared
                    .handle
                    .alias_prefix(Cause::Pool, donor, slot.seq, alias_len)
                    .is_ok()
            {
                slot.cursor = alias_len as usize;
            }
        }
        *committed_cells += projected;
        slots.push(slot);
    }
}

/// Plans and executes one prefill round. Returns true when chunks were
/// deferred by the occupancy high-water mark.
fn run_prefill_iteration(shared: &PoolShared, slots: &mut [Slot]) -> bool {
    let prefilling: Vec<usize> =
        (0..slots.len()).filter(|&i| slots[i].prefilling()).collect();
    if prefilling.is_empty() {
        return false;
    }
    let (used, cap) = shared.handle.occupancy();
    if over_high_water(used, cap) {
        return true; // Prefill deferred at chunk granularity; decodes proceed.
    }
    let chunk = chunk_size(shared.cfg.n_batch, prefilling.len());
    let views: Vec<(usize, &[TokenId], usize)> =
        prefilling.iter().map(|&i| (i, slots[i].prompt.as_slice(), slots[i].cursor)).collect();
    let groups = group_prefills(&views, planner::group_key);
    for group in groups {
        let leader = group.leader;
        let cursor = slots[leader].cursor;
        let mut span = chunk.min(slots[leader].prompt.len() - cursor);
        for &f in &group.followers {
            span = span.min(slots[f].prompt.len() - slots[f].cursor);
        }
        if span == 0 {
            continue;
        }
        let tokens = slots[leader].prompt[cursor..cursor + span].to_vec();
        let logits = match shared.handle.forward_last(
            Cause::Pool,
            slots[leader].seq,
            cursor as u32,
            tokens,
            RegionTag::Sliding,
            Phase::Prefill,
        ) {
            Ok(l) => l,
            Err(e) => {
                fail_slot(shared, &mut slots[leader], e);
                continue;
            }
        };
        slots[leader].cursor += span;
        if slots[leader].decoding() {
            let (tok, _) = greedy_sample(&logits);
            slots[leader].pending = Some(tok);
        }
        // Followers take the leader's new state by re-aliasing the longer
        // prefix: drop their (aliased) cells, alias cursor + span tokens.
        let leader_seq = slots[leader].seq;
        let shared_len = (cursor + span) as u64;
        for &f in &group.followers {
            let fseq = slots[f].seq;
            let res = shared
                .handle
                .seq_remove(Cause::Pool, fseq, 0)
                .and_then(|_| shared.handle.alias_prefix(Cause::Pool, leader_seq, fseq, shared_len));
            match res {
                Ok(()) => {
                    slots[f].cursor += span;
                    shared.counters.grouped_followers.fetch_add(1, Ordering::Relaxed);
                    if slots[f].decoding() {
                        slots[f].needs_bootstrap = true;
                    }
                }
                Err(e) => fail_slot(shared, &mut slots[f], e),
            }
        }
    }
    // Followers that completed their whole prompt via aliasing re-forward
    // the final prompt token to obtain their decode-start logits.
    for i in 0..slots.len() {
        if !slots[i].needs_bootstrap || slots[i].done {
            continue;
        }
        slots[i].needs_bootstrap = false;
        let last = slots[i].prompt.len() - 1;
        let tok = slots[i].prompt[last];
        let seq = slots[i].seq;
        let res = shared.handle.seq_remove(Cause::Pool, seq, last as u32).and_then(|_| {
            shared.handle.forward_last(
                Cause::Pool,
                seq,
                last as u32,
                vec![tok],
                RegionTag::Sliding,
                Phase::Prefill,
            )
        });
        match res {
            Ok(logits) => {
                let (t, _) = greedy_sample(&logits);
                slots[i].pending = Some(t);
            }
            Err(e) => fail_slot(shared, &mut slots[i], e),
        }
    }
    false
}

/// One committed token (plus verified drafts) per decoding slot.
fn run_decode_iteration(shared: &PoolShared, slots: &mut [Slot]) {
    let decoding: Vec<usize> = (0..slots.len())
        .filter(|&i| slots[i].decoding() && slots[i].pending.is_some())
        .collect();
    let n_active = decoding.len();
    for &i in &decoding {
        let slot = &mut slots[i];
        if slot.generated.len() >= slot.max_tokens {
            slot.done = true;
            continue;
        }
        let cap = shared.cfg.pld.draft_len(n_active, slot.acceptance_ema);
        let pending = slot.pending.take().expect("filtered on pending");
        let mut history = slot.prompt.clone();
        history.extend(&slot.generated);
        history.push(pending);
        let draft = planner::pld_draft(&history, shared.cfg.pld.max_ngram, cap);
        shared.counters.drafted_tokens.fetch_add(draft.len() as u64, Ordering::Relaxed);

        let start = (slot.prompt.len() + slot.generated.len()) as u32;
        let mut batch = Vec::with_capacity(1 + draft.len());
        batch.push(pending);
        batch.extend(&draft);
        let logits_vec = match shared.handle.forward_all(
            Cause::Pool,
            slot.seq,
            start,
            batch,
            RegionTag::Sliding,
            Phase::Decode,
        ) {
            Ok(v) => v,
            Err(e) => {
                fail_slot(shared, slot, e);
                continue;
            }
        };
        slot.generated.push(pending);
        // Verify: accept the longest draft prefix where each token equals
        // the greedy token implied by the preceding logits.
        let mut accepted = 0usize;
        let mut cur = &logits_vec[0];
        loop {
            let (tok, _) = greedy_sample(cur);
            if tok == shared.eos || slot.generated.len() >= slot.max_tokens {
                slot.done = true;
                break;
            }
            if accepted < draft.len() && draft[accepted] == tok {
                slot.generated.push(tok);
                accepted += 1;
                cur = &logits_vec[accepted];
            } else {
                slot.pending = Some(tok);
                break;
            }
        }
        shared.counters.accepted_tokens.fetch_add(accepted as u64, Ordering::Relaxed);
        // Roll back cells beyond the committed range (rejected drafts, and
        // anything past an EOS cut).
        let committed_end = (slot.prompt.len() + slot.generated.len()) as u32;
        if accepted < draft.len() {
            if let Err(e) = shared.handle.seq_remove(Cause::Pool, slot.seq, committed_end) {
                fail_slot(shared, slot, e);
                continue;
            }
        }
        if !draft.is_empty() {
            let rate = accepted as f32 / draft.len() as f32;
            let a = shared.cfg.pld.ema_alpha;
            slot.acceptance_ema = (1.0 - a) * slot.acceptance_ema + a * rate;
        }
    }
}

fn finish_slots(shared: &PoolShared, slots: &mut Vec<Slot>, committed_cells: &mut u64) {
    let mut i = 0;
    while i < slots.len() {
        if !slots[i].done {
            i += 1;
            continue;
        }
        let slot = slots.remove(i);
        *committed_cells -= slot.projected;
        if !slot.replied {
            try_radix_insert(shared, &slot);
        }
        let _ = shared.handle.seq_remove(Cause::Pool, slot.seq, 0);
        shared.seq_pool.release(slot.seq);
        shared.counters.completions.fetch_add(1, Ordering::Relaxed);
        if !slot.replied {
            let output =
                CompletionOutput { seed: derive_seed(&slot.prompt), tokens: slot.generated.clone() };
            let _ = slot.reply.send(Ok(output));
        }
    }
}

/// Pins the finished prompt prefix into the radix cache, gated against the
/// occupancy high-water mark with leaf-oldest eviction as back-pressure.
fn try_radix_insert(shared: &PoolShared, slot: &Slot) {
    if slot.prompt.is_empty() {
        return;
    }
    let mut radix = shared.radix.lock();
    loop {
        let (used, cap) = shared.handle.occupancy();
        if !over_high_water(used, cap) {
            break;
        }
        match radix.evict_one() {
            Some(donor) => {
                let _ = shared.handle.release_seq(Cause::Pool, donor);
            }
            None => {
                radix.record_skip();
                return;
            }
        }
    }
    let pin = SequenceId::transient(shared.next_pin.fetch_add(1, Ordering::Relaxed));
    if shared.handle.register_seq(Cause::Pool, pin).is_err() {
        radix.record_skip();
        return;
    }
    if shared
        .handle
        .alias_prefix(Cause::Pool, slot.seq, pin, slot.prompt.len() as u64)
        .is_err()
    {
        let _ = shared.handle.release_seq(Cause::Pool, pin);
        radix.record_skip();
        return;
    }
    if let Some(displaced) = radix.insert(&slot.prompt, pin) {
        let _ = shared.handle.release_seq(Cause::Pool, displaced);
    }
}

fn fail_slot(_shared: &PoolShared, slot: &mut Slot, e: EngineError) {
    slot.done = true;
    slot.pending = None;
    slot.replied = true;
    let _ = slot.reply.send(Err(e));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::DispatchWorker;
    use streamkv_core::{CellPool, ForwardStats, Model, ModelConfig, Tokenizer};

    struct Fx {
        _worker: DispatchWorker,
        pool: PoolEngine,
        tok: Tokenizer,
        handle: DispatchHandle,
    }

    fn fixture(capacity_cells: u64, pld: PldConfig) -> Fx {
        let cfg = ModelConfig::tiny_for_tests();
        let model = Arc::new(Model::new(&cfg).unwrap());
        let cells = CellPool::new(cfg.layers, cfg.model_dim, capacity_cells);
        let worker = DispatchWorker::spawn(model, cells, Arc::new(ForwardStats::new()));
        let handle = worker.handle();
        let seq_pool = Arc::new(SequencePool::new(8, 0));
        for id in seq_pool.all_ids() {
            handle.register_seq(Cause::Pool, id).unwrap();
        }
        let tok = Tokenizer::new(cfg.vocab_size).unwrap();
        let driver_cfg = PoolDriverConfig {
            layers: cfg.layers,
            pld,
            ..Default::default()
        };
        let pool = PoolEngine::spawn(handle.clone(), seq_pool, driver_cfg, tok.eos());
        Fx { _worker: worker, pool, tok, handle }
    }

    #[test]
    fn basic_completion_round_trip() {
        let fx = fixture(1 << 16, PldConfig::default());
        let prompt = fx.tok.tokenize("O 12 H 14 L 11 C 13 V 57 ;");
        let out = fx.pool.submit(prompt.clone(), 4).recv().unwrap().unwrap();
        assert!(out.tokens.len() <= 4);
        assert_eq!(out.seed, derive_seed(&prompt));
    }

    #[test]
    fn identical_prompts_identical_tokens() {
        let fx = fixture(1 << 16, PldConfig::default());
        let prompt = fx.tok.tokenize("UP DOWN YES NO 1 2 3");
        let a = fx.pool.submit(prompt.clone(), 6).recv().unwrap().unwrap();
        let b = fx.pool.submit(prompt.clone(), 6).recv().unwrap().unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn radix_restore_keeps_occupancy_flat_and_output_identical() {
        let fx = fixture(1 << 16, PldConfig { enabled: false, ..Default::default() });
        let prompt = fx.tok.tokenize("O 10 H 12 L 10 C 11 V 30 ; O 11 H 13 L 11 C 12 V 31 ;");
        let cold = fx.pool.submit(prompt.clone(), 5).recv().unwrap().unwrap();
        // The prefix is now pinned; a second identical request restores it.
        let stats_before = fx.handle.stats().snapshot();
        let warm = fx.pool.submit(prompt.clone(), 5).recv().unwrap().unwrap();
        let prefill_delta =
            fx.handle.stats().snapshot().pool.prefill - stats_before.pool.prefill;
        assert_eq!(cold.tokens, warm.tokens, "token-identical with prefix restore");
        assert!(
            prefill_delta <= 2,
            "warm prefill must be O(1), got {prefill_delta} tokens"
        );
        let snap = fx.pool.snapshot();
        assert!(snap.radix.hits >= 1);
    }

    #[test]
    fn grouped_prefill_halves_shared_prompt_cost() {
        let fx = fixture(1 << 18, PldConfig { enabled: false, ..Default::default() });
        // A long shared prompt, issued twice concurrently.
        let mut text = String::new();
        for i in 0..40 {
            text.push_str(&format!("O {:02} H {:02} L {:02} C {:02} V {:02} ; ", 10 + i, 12 + i, 10 + i, 11 + i, 30 + i));
        }
        let prompt = fx.tok.tokenize(&text);
        let naive = 2 * prompt.len() as u64;
        let before = fx.handle.stats().snapshot();
        let mut rxs = fx.pool.submit_many(vec![(prompt.clone(), 2), (prompt.clone(), 2)]);
        let rx2 = rxs.pop().unwrap();
        let rx1 = rxs.pop().unwrap();
        let a = rx1.recv().unwrap().unwrap();
        let b = rx2.recv().unwrap().unwrap();
        let prefill = fx.handle.stats().snapshot().pool.prefill - before.pool.prefill;
        assert_eq!(a.tokens, b.tokens);
        assert!(
            prefill <= naive / 2 + 8,
            "pair prefill {prefill} should be about half of naive {naive}"
        );
        assert!(fx.pool.snapshot().grouped_followers >= 1);
    }

    #[test]
    fn oversized_request_is_a_sizing_error() {
        let fx = fixture(256, PldConfig::default());
        // Budget is 128 cells = 64 tokens at L=2; ask for far more.
        let prompt = fx.tok.tokenize(&"9 ".repeat(100));
        let err = fx.pool.submit(prompt, 50).recv().unwrap().unwrap_err();
        assert!(matches!(err, EngineError::RequestTooLarge { .. }));
        assert_eq!(fx.pool.snapshot().sizing_errors, 1);
    }

    #[test]
    fn speculation_on_off_equivalence_quick() {
        let on = fixture(1 << 16, PldConfig::default());
        let off = fixture(1 << 16, PldConfig { enabled: false, ..Default::default() });
        // Repetitive prompt to give PLD real matches.
        let prompt = on.tok.tokenize("1 2 3 1 2 3 1 2 3");
        let a = on.pool.submit(prompt.clone(), 8).recv().unwrap().unwrap();
        let b = off.pool.submit(prompt, 8).recv().unwrap().unwrap();
        assert_eq!(a.tokens, b.tokens, "greedy outputs identical with PLD on or off");
    }
}
