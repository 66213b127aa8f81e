//! Per-session event stream: ordered, replayable, broadcast to any number
//! of subscribers. Event ids increase strictly per session; a bounded
//! replay buffer lets reconnecting clients resume from a last-seen id, and
//! the broadcast channel's bounded capacity disconnects consumers that fall
//! too far behind.

use parking_lot::Mutex;
use serde::Serialize;
use std::collections::VecDeque;
use tokio::sync::broadcast;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    DataUpdated {
        records: u64,
        dropped_total: u64,
    },
    FlashReady {
        flash_id: u64,
        question: String,
        answer: String,
        confidence: f32,
    },
    Stats {
        used_cells: u64,
        capacity_cells: u64,
        ring_pending: u64,
        ring_dropped_total: u64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::DataUpdated { .. } => "data_updated",
            EventKind::FlashReady { .. } => "flash_ready",
            EventKind::Stats { .. } => "stats",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub id: u64,
    pub session_id: u64,
    pub data_version: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

struct BusState {
    next_id: u64,
    replay: VecDeque<Event>,
}

pub struct EventBus {
    session_id: u64,
    state: Mutex<BusState>,
    replay_cap: usize,
    tx: broadcast::Sender<Event>,
}

impl EventBus {
    pub fn new(session_id: u64, replay_cap: usize, channel_cap: usize) -> Self {
        let (tx, _) = broadcast::channel(channel_cap.max(1));
        Self {
            session_id,
            state: Mutex::new(BusState { next_id: 0, replay: VecDeque::new() }),
            replay_cap,
            tx,
        }
    }

    /// Assigns the next event id and delivers to all subscribers. Events
    /// with no subscribers are dropped without error.
    pub fn emit(&self, data_version: u64, kind: EventKind) -> Event {
        let event = {
            let mut st = self.state.lock();
            let event =
                Event { id: st.next_id, session_id: self.session_id, data_version, kind };
            st.next_id += 1;
            st.replay.push_back(event.clone());
            while st.replay.len() > self.replay_cap {
                st.replay.pop_front();
            }
            event
        };
        let _ = self.tx.send(event.clone());
        event
    }

    /// Subscribes, optionally resuming after `last_seen_id`. Returns the
    /// replayable backlog (events with id > last_seen_id still buffered)
    /// and a live receiver whose events follow the backlog; duplicates
    /// between the two must be filtered by id by the consumer.
    pub fn subscribe(&self, last_seen_id: Option<u64>) -> (Vec<Event>, broadcast::Receiver<Event>) {
        let st = self.state.lock();
        let rx = self.tx.subscribe();
        let backlog = match last_seen_id {
            None => Vec::new(),
            Some(seen) => st.replay.iter().filter(|e| e.id > seen).cloned().collect(),
        };
        (backlog, rx)
    }

    pub fn subscriber_count(&self) -> usize {
        self.tx.receiver_count()
    }

    pub fn last_id(&self) -> Option<u64> {
        let st = self.state.lock();
        st.next_id.checked_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_increase_strictly() {
        let bus = EventBus::new(7, 16, 16);
        let a = bus.emit(0, EventKind::DataUpdated { records: 1, dropped_total: 0 });
        let b = bus.emit(1, EventKind::DataUpdated { records: 2, dropped_total: 0 });
        assert_eq!(a.id, 0);
        assert_eq!(b.id, 1);
        assert_eq!(a.session_id, 7);
    }

    #[test]
    fn no_subscriber_is_not_an_error() {
        let bus = EventBus::new(1, 4, 4);
        bus.emit(0, EventKind::Stats {
            used_cells: 0,
            capacity_cells: 10,
            ring_pending: 0,
            ring_dropped_total: 0,
        });
        assert_eq!(bus.subscriber_count(), 0);
    }

    #[test]
    fn two_subscribers_see_identical_ordered_streams() {
        let bus = EventBus::new(1, 16, 16);
        let (_, mut rx1) = bus.subscribe(None);
        let (_, mut rx2) = bus.subscribe(None);
        for i in 0..5 {
            bus.emit(i, EventKind::DataUpdated { records: i, dropped_total: 0 });
        }
        let drain = |rx: &mut broadcast::Receiver<Event>| {
            let mut got = Vec::new();
            while let Ok(e) = rx.try_recv() {
                got.push(e.id);
            }
            got
        };
        let a = drain(&mut rx1);
        let b = drain(&mut rx2);
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn resume_replays_only_unseen() {
        let bus = EventBus::new(1, 16, 16);
        for i in 0..6 {
            bus.emit(i, EventKind::DataUpdated { records: i, dropped_total: 0 });
        }
        let (backlog, _) = bus.subscribe(Some(2));
        let ids: Vec<u64> = backlog.iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![3, 4, 5]);
    }

    #[test]
    fn replay_buffer_is_bounded() {
        let bus = EventBus::new(1, 3, 16);
        for i in 0..10 {
            bus.emit(i, EventKind::DataUpdated { records: i, dropped_total: 0 });
        }
        let (backlog, _) = bus.subscribe(Some(0));
        assert_eq!(backlog.len(), 3, "only the newest 3 retained");
        assert_eq!(backlog[0].id, 7);
    }
}
