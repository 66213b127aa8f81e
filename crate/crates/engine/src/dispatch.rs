//! Single-worker decode dispatch with four priority classes.
//!
//! Every model forward and every cache mutation in the system flows through
//! one worker thread fronted by a priority queue (FLASH > SESSION > POOL >
//! STREAM, FIFO within a class by submission sequence number). Callers
//! block on a per-request completion channel and hold no shared resource
//! while they wait. The worker yields at batch boundaries: a high-priority
//! submission runs immediately after the batch in flight, never behind the
//! queue of lower-priority work.

use crate::error::{EngineError, Result};
use parking_lot::{Condvar, Mutex, MutexGuard};
use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;
use streamkv_core::{
    Cause, CellPool, ForwardRequest, ForwardStats, Logits, Model, Phase, RegionTag, SequenceId,
    TokenId,
};

/// Model-plus-pool state owned by the worker. The pool sits behind a mutex
/// so that reads (occupancy, digest) can observe a consistent snapshot from
/// any thread; the worker is the only mutator.
pub struct EngineCore {
    pub model: Arc<Model>,
    pub pool: Mutex<CellPool>,
    pub stats: Arc<ForwardStats>,
}

/// One unit of worker-executed work.
pub enum WorkItem {
    Forward {
        seq: SequenceId,
        start_pos: u32,
        tokens: Vec<TokenId>,
        region: RegionTag,
        phase: Phase,
        want_all: bool,
    },
    SeqRemove {
        seq: SequenceId,
        from_pos: u32,
    },
    AliasPrefix {
        donor: SequenceId,
        target: SequenceId,
        len_tokens: u64,
    },
    EvictOldest {
        seq: SequenceId,
        n_tokens: u64,
    },
    RegisterSeq {
        seq: SequenceId,
    },
    ReleaseSeq {
        seq: SequenceId,
    },
}

impl WorkItem {
    fn kind(&self) -> &'static str {
        match self {
            WorkItem::Forward { .. } => "forward",
            WorkItem::SeqRemove { .. } => "seq_remove",
            WorkItem::AliasPrefix { .. } => "alias_prefix",
            WorkItem::EvictOldest { .. } => "evict_oldest",
            WorkItem::RegisterSeq { .. } => "register_seq",
            WorkItem::ReleaseSeq { .. } => "release_seq",
        }
    }
}

pub enum WorkOutput {
    Logits(Vec<Logits>),
    Removed(u64),
    Evicted(Vec<u32>),
    Unit,
}

/// Executed-batch record, used by tests to verify scheduling order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRecord {
    pub priority: Cause,
    pub submit_seq: u64,
    pub kind: &'static str,
}

struct Queued {
    priority: Cause,
    submit_seq: u64,
    item: WorkItem,
    done: mpsc::SyncSender<Result<WorkOutput>>,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.priority == other.priority && self.submit_seq == other.submit_seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // Max-heap: higher priority first, then lower submit_seq.
        self.priority
            .cmp(&other.priority)
            .then_with(|| other.submit_seq.cmp(&self.submit_seq))
    }
}

#[derive(Default)]
struct QueueState {
    heap: BinaryHeap<Queued>,
}

struct Shared {
    core: EngineCore,
    queue: Mutex<QueueState>,
    cv: Condvar,
    shutdown: AtomicBool,
    next_seq: AtomicU64,
    depth: [AtomicU64; 4],
    executed: [AtomicU64; 4],
    log_enabled: AtomicBool,
    log: Mutex<Vec<ExecRecord>>,
    /// Injected per-batch execution delay; a fault-injection knob for
    /// scheduling tests, zero in normal operation.
    batch_delay: Mutex<Duration>,
}

/// Cloneable handle for submitting work and reading scheduler state.
#[derive(Clone)]
pub struct DispatchHandle {
    shared: Arc<Shared>,
}

pub struct DispatchWorker {
    handle: DispatchHandle,
    thread: Option<thread::JoinHandle<()>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct SchedulerCounters {
    pub queue_depth: [u64; 4],
    pub executed: [u64; 4],
}

impl DispatchWorker {
    pub fn spawn(model: Arc<Model>, pool: CellPool, stats: Arc<ForwardStats>) -> Self {
        let shared = Arc::new(Shared {
            core: EngineCore { model, pool: Mutex::new(pool), stats },
            queue: Mutex::new(QueueState::default()),
            cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
            next_seq: AtomicU64::new(0),
            depth: Default::default(),
            executed: Default::default(),
            log_enabled: AtomicBool::new(false),
            log: Mutex::new(Vec::new()),
            batch_delay: Mutex::new(Duration::ZERO),
        });
        let worker_shared = Arc::clone(&shared);
        let thread = thread::Builder::new()
            .name("decode-dispatch".into())
            .spawn(move || worker_loop(worker_shared))
            .expect("spawn dispatch worker");
        Self { handle: DispatchHandle { shared }, thread: Some(thread) }
    }

    pub fn handle(&self) -> DispatchHandle {
        self.handle.clone()
    }

    pub fn shutdown(&mut self) {
        {
            // Under the queue lock so the flag cannot slip between the
            // worker's empty-check and its wait.
            let _q = self.handle.shared.queue.lock();
            self.handle.shared.shutdown.store(true, Ordering::SeqCst);
        }
        self.handle.shared.cv.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for DispatchWorker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: Arc<Shared>) {
    loop {
        let queued = {
            let mut q = shared.queue.lock();
            loop {
                if let Some(item) = q.heap.pop() {
                    break item;
                }
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                shared.cv.wait(&mut q);
            }
        };
        shared.depth[queued.priority.index()].fetch_sub(1, Ordering::Relaxed);
        let delay = *shared.batch_delay.lock();
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        let result = execute(&shared.core, queued.item_kind_logged(&shared));
        shared.executed[queued.priority.index()].fetch_add(1, Ordering::Relaxed);
        // Receiver may have given up; that is fine.
        let _ = queued.done.send(result.map_err(EngineError::from));
    }
}

impl Queued {
    fn item_kind_logged(&self, shared: &Shared) -> (&WorkItem, Cause) {
        if shared.log_enabled.load(Ordering::Relaxed) {
            shared.log.lock().push(ExecRecord {
                priority: self.priority,
                submit_seq: self.submit_seq,
                kind: self.item.kind(),
            });
        }
        (&self.item, self.priority)
    }
}

fn execute(
    core: &EngineCore,
    (item, priority): (&WorkItem, Cause),
) -> std::result::Result<WorkOutput, streamkv_core::CoreError> {
    let mut pool = core.pool.lock();
    match item {
        WorkItem::Forward { seq, start_pos, tokens, region, phase, want_all } => {
            let req = ForwardRequest {
                seq: *seq,
                start_pos: *start_pos,
                tokens,
                region: *region,
                cause: priority,
                phase: *phase,
            };
            let out = if *want_all {
                core.model.forward_all(&mut pool, req, &core.stats)?
            } else {
                vec![core.model.forward(&mut pool, req, &core.stats)?]
            };
            Ok(WorkOutput::Logits(out))
        }
        WorkItem::SeqRemove { seq, from_pos } => {
            Ok(WorkOutput::Removed(pool.seq_remove(*seq, *from_pos)?))
        }
        WorkItem::AliasPrefix { donor, target, len_tokens } => {
            pool.alias_prefix(*donor, *target, *len_tokens)?;
            Ok(WorkOutput::Unit)
        }
        WorkItem::EvictOldest { seq, n_tokens } => {
            Ok(WorkOutput::Evicted(pool.evict_oldest(*seq, *n_tokens)?))
        }
        WorkItem::RegisterSeq { seq } => {
            pool.register_sequence(*seq)?;
            Ok(WorkOutput::Unit)
        }
        WorkItem::ReleaseSeq { seq } => {
            pool.release_sequence(*seq)?;
            Ok(WorkOutput::Unit)
        }
    }
}

impl DispatchHandle {
    /// Enqueues a work item and returns a ticket for its completion.
    pub fn submit(&self, priority: Cause, item: WorkItem) -> Result<Ticket> {
        if self.shared.shutdown.load(Ordering::SeqCst) {
            return Err(EngineError::Shutdown);
        }
        let (tx, rx) = mpsc::sync_channel(1);
        let submit_seq = self.shared.next_seq.fetch_add(1, Ordering::SeqCst);
        {
            let mut q = self.shared.queue.lock();
            q.heap.push(Queued { priority, submit_seq, item, done: tx });
        }
        self.shared.depth[priority.index()].fetch_add(1, Ordering::Relaxed);
        self.shared.cv.notify_one();
        Ok(Ticket { rx })
    }

    /// Submit-and-wait convenience.
    pub fn run(&self, priority: Cause, item: WorkItem) -> Result<WorkOutput> {
        self.submit(priority, item)?.wait()
    }

    pub fn forward_last(
        &self,
        priority: Cause,
        seq: SequenceId,
        start_pos: u32,
        tokens: Vec<TokenId>,
        region: RegionTag,
        phase: Phase,
    ) -> Result<Logits> {
        let out = self.run(
            priority,
            WorkItem::Forward { seq, start_pos, tokens, region, phase, want_all: false },
        )?;
        match out {
            WorkOutput::Logits(mut v) => {
                v.pop().ok_or_else(|| EngineError::Internal("empty forward output".into()))
            }
            _ => Err(EngineError::Internal("unexpected forward output".into())),
        }
    }

    pub fn forward_all(
        &self,
        priority: Cause,
        seq: SequenceId,
        start_pos: u32,
        tokens: Vec<TokenId>,
        region: RegionTag,
        phase: Phase,
    ) -> Result<Vec<Logits>> {
        let out = self.run(
            priority,
            WorkItem::Forward { seq, start_pos, tokens, region, phase, want_all: true },
        )?;
        match out {
            WorkOutput::Logits(v) => Ok(v),
            _ => Err(EngineError::Internal("unexpected forward output".into())),
        }
    }

    pub fn seq_remove(&self, priority: Cause, seq: SequenceId, from_pos: u32) -> Result<u64> {
        match self.run(priority, WorkItem::SeqRemove { seq, from_pos })? {
            WorkOutput::Removed(n) => Ok(n),
            _ => Err(EngineError::Internal("unexpected seq_remove output".into())),
        }
    }

    pub fn alias_prefix(
        &self,
        priority: Cause,
        donor: SequenceId,
        target: SequenceId,
        len_tokens: u64,
    ) -> Result<()> {
        self.run(priority, WorkItem::AliasPrefix { donor, target, len_tokens }).map(|_| ())
    }

    pub fn evict_oldest(
        &self,
        priority: Cause,
        seq: SequenceId,
        n_tokens: u64,
    ) -> Result<Vec<u32>> {
        match self.run(priority, WorkItem::EvictOldest { seq, n_tokens })? {
            WorkOutput::Evicted(v) => Ok(v),
            _ => Err(EngineError::Internal("unexpected evict output".into())),
        }
    }

    pub fn register_seq(&self, priority: Cause, seq: SequenceId) -> Result<()> {
        self.run(priority, WorkItem::RegisterSeq { seq }).map(|_| ())
    }

    pub fn release_seq(&self, priority: Cause, seq: SequenceId) -> Result<()> {
        self.run(priority, WorkItem::ReleaseSeq { seq }).map(|_| ())
    }

    /// Consistent snapshot access to the pool. Mutation and snapshot are
    /// mutually exclusive via the pool lock.
    pub fn with_pool<R>(&self, f: impl FnOnce(&CellPool) -> R) -> R {
        f(&self.core_pool())
    }

    fn core_pool(&self) -> MutexGuard<'_, CellPool> {
        self.shared.core.pool.lock()
    }

    pub fn occupancy(&self) -> (u64, u64) {
        self.with_pool(|p| p.occupancy())
    }

    pub fn digest(&self, seq: SequenceId) -> Result<u64> {
        Ok(self.with_pool(|p| p.digest(seq))?)
    }

    pub fn model(&self) -> Arc<Model> {
        Arc::clone(&self.shared.core.model)
    }

    pub fn stats(&self) -> Arc<ForwardStats> {
        Arc::clone(&self.shared.core.stats)
    }

    pub fn counters(&self) -> SchedulerCounters {
        let read = |arr: &[AtomicU64; 4]| {
            [
                arr[0].load(Ordering::Relaxed),
                arr[1].load(Ordering::Relaxed),
                arr[2].load(Ordering::Relaxed),
                arr[3].load(Ordering::Relaxed),
            ]
        };
        SchedulerCounters {
            queue_depth: read(&self.shared.depth),
            executed: read(&self.shared.executed),
        }
    }

    pub fn set_batch_delay(&self, delay: Duration) {
        *self.shared.batch_delay.lock() = delay;
    }

    pub fn enable_exec_log(&self) {
        self.shared.log_enabled.store(true, Ordering::Relaxed);
    }

    pub fn exec_log(&self) -> Vec<ExecRecord> {
        self.shared.log.lock().clone()
    }
}

/// Completion ticket; the caller blocks only on its own request.
pub struct Ticket {
    rx: mpsc::Receiver<Result<WorkOutput>>,
}

impl Ticket {
    pub fn wait(self) -> Result<WorkOutput> {
        self.rx.recv().map_err(|_| EngineError::Shutdown)?
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use streamkv_core::ModelConfig;

    fn worker() -> DispatchWorker {
        let cfg = ModelConfig::tiny_for_tests();
        let model = Arc::new(Model::new(&cfg).unwrap());
        let pool = CellPool::new(cfg.layers, cfg.model_dim, 1 << 16);
        DispatchWorker::spawn(model, pool, Arc::new(ForwardStats::new()))
    }

    fn fwd(seq: SequenceId, start: u32, ids: &[u32]) -> WorkItem {
        WorkItem::Forward {
            seq,
            start_pos: start,
            tokens: ids.iter().map(|&i| TokenId(i)).collect(),
            region: RegionTag::Sliding,
            phase: Phase::Prefill,
            want_all: false,
        }
    }

    #[test]
    fn flash_preempts_queued_stream_after_inflight_batch() {
        let w = worker();
        let h = w.handle();
        h.enable_exec_log();
        h.set_batch_delay(Duration::from_millis(40));
        let a = SequenceId::session(1);
        let b = SequenceId::session(2);
        let c = SequenceId::session(3);
        for s in [a, b, c] {
            // Registration consumes queue slots too; do it before timing.
            h.register_seq(Cause::Stream, s).unwrap();
        }
        let log_base = h.exec_log().len();
        let t_a = h.submit(Cause::Stream, fwd(a, 0, &[1])).unwrap();
        let t_b = h.submit(Cause::Stream, fwd(b, 0, &[2])).unwrap();
        // Give the worker time to start batch `a`, then submit FLASH.
        std::thread::sleep(Duration::from_millis(10));
        let t_c = h.submit(Cause::Flash, fwd(c, 0, &[3])).unwrap();
        t_a.wait().unwrap();
        t_b.wait().unwrap();
        t_c.wait().unwrap();
        let log = h.exec_log()[log_base..].to_vec();
        let order: Vec<Cause> = log.iter().map(|r| r.priority).collect();
        assert_eq!(order, vec![Cause::Stream, Cause::Flash, Cause::Stream], "a, c, b");
    }

    #[test]
    fn fifo_within_class() {
        let w = worker();
        let h = w.handle();
        h.enable_exec_log();
        h.set_batch_delay(Duration::from_millis(20));
        let a = SequenceId::session(1);
        let b = SequenceId::session(2);
        h.register_seq(Cause::Stream, a).unwrap();
        h.register_seq(Cause::Stream, b).unwrap();
        let base = h.exec_log().len();
        let t1 = h.submit(Cause::Session, fwd(a, 0, &[1])).unwrap();
        let t2 = h.submit(Cause::Session, fwd(b, 0, &[2])).unwrap();
        t1.wait().unwrap();
        t2.wait().unwrap();
        let log = h.exec_log()[base..].to_vec();
        assert!(log[0].submit_seq < log[1].submit_seq);
    }

    #[test]
    fn idle_worker_wakes_on_submit() {
        let w = worker();
        let h = w.handle();
        std::thread::sleep(Duration::from_millis(30));
        let s = SequenceId::session(1);
        h.register_seq(Cause::Pool, s).unwrap();
        let out = h.forward_last(Cause::Pool, s, 0, vec![TokenId(1)], RegionTag::Sliding, Phase::Prefill);
        assert!(out.is_ok());
    }

    #[test]
    fn shutdown_rejects_new_submissions() {
        let mut w = worker();
        let h = w.handle();
        w.shutdown();
        let s = SequenceId::session(1);
        assert!(matches!(
            h.submit(Cause::Session, WorkItem::RegisterSeq { seq: s }),
            Err(EngineError::Shutdown)
        ));
    }

    #[test]
    fn errors_propagate_to_caller() {
        let w = worker();
        let h = w.handle();
        let s = SequenceId::session(9);
        // Never registered: forward must fail with UnknownSequence.
        let err = h
            .forward_last(Cause::Session, s, 0, vec![TokenId(1)], RegionTag::Sliding, Phase::Prefill)
            .unwrap_err();
        assert!(matches!(err, EngineError::Core(streamkv_core::CoreError::UnknownSequence(_))));
    }
}
