//! Small concurrency helpers.

use parking_lot::{Condvar, Mutex};
use std::sync::atomic::{AtomicU64, Ordering};

/// Strict-FIFO serialization: callers pass through in ticket order.
/// Used to serialize session turns (queries, ingestion, registration) so
/// that arrival order is the execution order.
pub struct Turnstile {
    next: AtomicU64,
    serving: Mutex<u64>,
    cv: Condvar,
}

impl Default for Turnstile {
    fn default() -> Self {
        Self::new()
    }
}

impl Turnstile {
    pub fn new() -> Self {
        Self { next: AtomicU64::new(0), serving: Mutex::new(0), cv: Condvar::new() }
    }

    pub fn enter(&self) -> TurnstileGuard<'_> {
        let ticket = self.next.fetch_add(1, Ordering::SeqCst);
        let mut serving = self.serving.lock();
        while *serving != ticket {
            self.cv.wait(&mut serving);
        }
        TurnstileGuard { turnstile: self }
    }
}

pub struct TurnstileGuard<'a> {
    turnstile: &'a Turnstile,
}

impl Drop for TurnstileGuard<'_> {
    fn drop(&mut self) {
        let mut serving = self.turnstile.serving.lock();
        *serving += 1;
        self.turnstile.cv.notify_all();
    }
}
