//! Bounded single-producer / single-consumer record ring for the data
//! plane. Push never blocks the producer: when the ring is full the oldest
//! pending record is discarded and counted, so a stalled consumer can only
//! ever cost data, never latency.

use crossbeam_queue::ArrayQueue;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PushOutcome {
    pub accepted: bool,
    /// Records discarded to make room for this push (0 or 1).
    pub dropped_delta: u64,
}

pub struct RecordRing {
    queue: ArrayQueue<String>,
    dropped_total: AtomicU64,
    pushed_total: AtomicU64,
    drained_total: AtomicU64,
}

impl RecordRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            queue: ArrayQueue::new(capacity.max(1)),
            dropped_total: AtomicU64::new(0),
            pushed_total: AtomicU64::new(0),
            drained_total: AtomicU64::new(0),
        }
    }

    /// Enqueues a record, discarding the oldest pending record first if the
    /// ring is full. Returns without waiting on the consumer.
    pub fn push(&self, record: String) -> PushOutcome {
        self.pushed_total.fetch_add(1, Ordering::Relaxed);
        let displaced = self.queue.force_push(record);
        let dropped = if displaced.is_some() {
            self.dropped_total.fetch_add(1, Ordering::Relaxed);
            1
        } else {
            0
        };
        PushOutcome { accepted: true, dropped_delta: dropped }
    }

    /// Removes up to `max` oldest pending records in arrival order.
    pub fn drain(&self, max: usize) -> Vec<String> {
        let mut batch = Vec::new();
        while batch.len() < max {
            match self.queue.pop() {
                Some(r) => batch.push(r),
                None => break,
            }
        }
        self.drained_total.fetch_add(batch.len() as u64, Ordering::Relaxed);
        batch
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn capacity(&self) -> usize {
        self.queue.capacity()
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped_total.load(Ordering::Relaxed)
    }

    pub fn pushed_total(&self) -> u64 {
        self.pushed_total.load(Ordering::Relaxed)
    }

    pub fn drained_total(&self) -> u64 {
        self.drained_total.load(Ordering::Relaxed)
    }
}
