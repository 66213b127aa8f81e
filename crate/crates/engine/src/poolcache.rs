//! Stateless-request substrate: the pre-allocated sequence pool, the radix
//! prefix cache with donor pinning and leaf-oldest eviction, deterministic
//! sampler seeding, and the response/render/tokenize LRU caches.

use crate::error::{EngineError, Result};
use parking_lot::{Condvar, Mutex};
use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};
use streamkv_core::hash::fnv1a64_tokens;
use streamkv_core::{SeqKind, SequenceId, TokenId};

// ---------------------------------------------------------------------------
// Sequence pool

struct PoolInner {
    free: HashMap<SeqKind, VecDeque<SequenceId>>,
    waiters: HashMap<SeqKind, VecDeque<u64>>,
    next_ticket: u64,
}

/// Fixed sets of pre-created sequence ids: P transient slots for stateless
/// requests, S session slots for long-lived sessions. Acquisition blocks
/// with a deadline and wakes waiters FIFO.
pub struct SequencePool {
    inner: Mutex<PoolInner>,
    cv: Condvar,
    transient_total: usize,
    session_total: usize,
}

impl SequencePool {
    pub fn new(transient: usize, session: usize) -> Self {
        let mut free = HashMap::new();
        free.insert(
            SeqKind::Transient,
            (0..transient as u64).map(SequenceId::transient).collect::<VecDeque<_>>(),
        );
        free.insert(
            SeqKind::Session,
            (0..session as u64).map(|i| SequenceId::session(1_000_000 + i)).collect(),
        );
        let mut waiters = HashMap::new();
        waiters.insert(SeqKind::Transient, VecDeque::new());
        waiters.insert(SeqKind::Session, VecDeque::new());
        Self {
            inner: Mutex::new(PoolInner { free, waiters, next_ticket: 0 }),
            cv: Condvar::new(),
            transient_total: transient,
            session_total: session,
        }
    }

    /// All ids ever owned by the pool; the engine registers them in the
    /// cell pool once at startup.
    pub fn all_ids(&self) -> Vec<SequenceId> {
        let inner = self.inner.lock();
        inner.free.values().flatten().copied().collect()
    }

    /// Blocking FIFO acquisition. `timeout` of zero means try-acquire.
    pub fn acquire(&self, kind: SeqKind, timeout: Duration) -> Result<SequenceId> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock();
        let ticket = inner.next_ticket;
        inner.next_ticket += 1;
        inner.waiters.get_mut(&kind).unwrap().push_back(ticket);
        loop {
            let my_turn = inner.waiters[&kind].front() == Some(&ticket);
            if my_turn {
                if let Some(id) = inner.free.get_mut(&kind).unwrap().pop_front() {
                    inner.waiters.get_mut(&kind).unwrap().pop_front();
                    self.cv.notify_all();
                    return Ok(id);
                }
            }
            let now = Instant::now();
            if now >= deadline {
                let q = inner.waiters.get_mut(&kind).unwrap();
                if let Some(pos) = q.iter().position(|t| *t == ticket) {
                    q.remove(pos);
                }
                self.cv.notify_all();
                return Err(EngineError::SlotTimeout);
            }
            self.cv.wait_until(&mut inner, deadline);
        }
    }

    pub fn release(&self, id: SequenceId) {
        let mut inner = self.inner.lock();
        inner.free.get_mut(&id.kind).unwrap().push_back(id);
        self.cv.notify_all();
    }

    pub fn free_count(&self, kind: SeqKind) -> usize {
        self.inner.lock().free[&kind].len()
    }

    pub fn totals(&self) -> (usize, usize) {
        (self.transient_total, self.session_total)
    }
}

// ---------------------------------------------------------------------------
// Radix prefix cache

/// Deterministic sampler seed: FNV-1a over the prompt token ids (4-byte
/// little-endian), reduced mod 2^32.
pub fn derive_seed(prompt: &[TokenId]) -> u32 {
    let ids: Vec<u32> = prompt.iter().map(|t| t.0).collect();
    (fnv1a64_tokens(&ids) & 0xFFFF_FFFF) as u32
}

#[derive(Debug)]
struct RadixNode {
    /// Tokens along the edge from the parent to this node.
    edge: Vec<u32>,
    /// Prefix length in tokens from the root through this node's edge.
    depth: usize,
    /// Pinned donor sequence holding this full root path, set when an
    /// insert ended here.
    donor: Option<SequenceId>,
    last_use: u64,
    children: HashMap<u32, RadixNode>,
}

impl RadixNode {
    fn leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RadixMatch {
    /// Longest cached prefix covered by a live donor.
    pub len: usize,
    pub donor: Option<SequenceId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct RadixStats {
    pub nodes: u64,
    pub inserts: u64,
    pub insert_skips: u64,
    pub evictions: u64,
    pub hits: u64,
    pub misses: u64,
}

/// Radix trie over token sequences. Each pinned node records the donor
/// sequence whose cells still hold the full path; restoring a prefix is a
/// metadata-only alias from that donor.
pub struct RadixCache {
    root: RadixNode,
    clock: u64,
    stats: RadixStats,
}

impl Default for RadixCache {
    fn default() -> Self {
        Self::new()
    }
}

impl RadixCache {
    pub fn new() -> Self {
        Self {
            root: RadixNode {
                edge: Vec::new(),
                depth: 0,
                donor: None,
                last_use: 0,
                children: HashMap::new(),
            },
            clock: 0,
            stats: RadixStats::default(),
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Longest cached prefix of `tokens` with a live donor. Touches the
    /// nodes along the path.
    pub fn lookup(&mut self, tokens: &[TokenId]) -> RadixMatch {
        let ids: Vec<u32> = tokens.iter().map(|t| t.0).collect();
        let mut matched = 0usize;
        let mut path: Vec<u32> = Vec::new();
        let donor = {
            let mut node = &self.root;
            loop {
                if matched == ids.len() {
                    break;
                }
                let Some(child) = node.children.get(&ids[matched]) else { break };
                let common =
                    child.edge.iter().zip(&ids[matched..]).take_while(|(a, b)| a == b).count();
                debug_assert!(common >= 1, "children are keyed by their first edge token");
                matched += common;
                path.push(child.edge[0]);
                node = child;
                if common < child.edge.len() {
                    break;
                }
            }
            // Any pin at or below the stopping node holds at least
            // `matched` tokens from the start of the same prefix.
            Self::find_donor(node)
        };
        let now = self.tick();
        Self::touch_path(&mut self.root, &path, now);
        let m = if donor.is_some() { matched } else { 0 };
        if m > 0 {
            self.stats.hits += 1;
        } else {
            self.stats.misses += 1;
        }
        RadixMatch { len: m, donor: if m > 0 { donor } else { None } }
    }

    fn touch_path(node: &mut RadixNode, path: &[u32], now: u64) {
        node.last_use = now;
        if let Some((first, rest)) = path.split_first() {
            if let Some(child) = node.children.get_mut(first) {
                Self::touch_path(child, rest, now);
            }
        }
    }

    fn find_donor(node: &RadixNode) -> Option<SequenceId> {
        if let Some(d) = node.donor {
            return Some(d);
        }
        for child in node.children.values() {
            if let Some(d) = Self::find_donor(child) {
                return Some(d);
            }
        }
        None
    }

    /// Records `tokens` with `donor` pinned at the full path. Returns the
    /// donor that was displaced at that exact node, if any (the caller
    /// releases it).
    pub fn insert(&mut self, tokens: &[TokenId], donor: SequenceId) -> Option<SequenceId> {
        let now = self.tick();
        self.stats.inserts += 1;
        let ids: Vec<u32> = tokens.iter().map(|t| t.0).collect();
        Self::insert_rec(&mut self.root, &ids, donor, now)
    }

    fn insert_rec(
        node: &mut RadixNode,
        ids: &[u32],
        donor: SequenceId,
        now: u64,
    ) -> Option<SequenceId> {
        node.last_use = now;
        let Some(&first) = ids.first() else {
            return node.donor.replace(donor);
        };
        match node.children.get_mut(&first) {
            None => {
                node.children.insert(
                    first,
                    RadixNode {
                        edge: ids.to_vec(),
                        depth: node.depth + ids.len(),
                        donor: Some(donor),
                        last_use: now,
                        children: HashMap::new(),
                    },
                );
                None
            }
            Some(child) => {
                let common = child.edge.iter().zip(ids).take_while(|(a, b)| a == b).count();
                if common < child.edge.len() {
                    // Split the edge at the divergence point.
                    let tail_edge = child.edge.split_off(common);
                    let tail = RadixNode {
                        edge: tail_edge,
                        depth: child.depth,
                        donor: child.donor.take(),
                        last_use: child.last_use,
                        children: std::mem::take(&mut child.children),
                    };
                    child.depth -= tail.edge.len();
                    child.children.insert(tail.edge[0], tail);
                }
                Self::insert_rec(child, &ids[common..], donor, now)
            }
        }
    }

    /// Evicts the least-recently-used leaf, returning its donor for
    /// release. Interior (shared) branches survive until they become
    /// leaves themselves.
    pub fn evict_one(&mut self) -> Option<SequenceId> {
        fn oldest_leaf(node: &RadixNode, path: &mut Vec<u32>, best: &mut Option<(u64, Vec<u32>)>) {
            if node.leaf() && node.donor.is_some() {
                if best.as_ref().map(|(age, _)| node.last_use < *age).unwrap_or(true) {
                    *best = Some((node.last_use, path.clone()));
                }
                return;
            }
            for (first, child) in &node.children {
                path.push(*first);
                oldest_leaf(child, path, best);
                path.pop();
            }
        }
        let mut best = None;
        oldest_leaf(&self.root, &mut Vec::new(), &mut best);
        let (_, path) = best?;
        let donor = self.remove_path(&path);
        if donor.is_some() {
            self.stats.evictions += 1;
        }
        donor
    }

    fn remove_path(&mut self, path: &[u32]) -> Option<SequenceId> {
        fn walk(node: &mut RadixNode, path: &[u32]) -> (Option<SequenceId>, bool) {
            let Some(first) = path.first() else {
                let donor = node.donor.take();
                return (donor, node.leaf());
            };
            let Some(child) = node.children.get_mut(first) else { return (None, false) };
            let (donor, remove_child) = walk(child, &path[1..]);
            if remove_child {
                node.children.remove(first);
            }
            // Prune donorless childless interiors on the way out.
            let removable = node.leaf() && node.donor.is_none();
            (donor, removable)
        }
        let (donor, _) = walk(&mut self.root, path);
        donor
    }

    pub fn record_skip(&mut self) {
        self.stats.insert_skips += 1;
    }

    pub fn stats(&self) -> RadixStats {
        let mut s = self.stats;
        s.nodes = self.node_count() as u64;
        s
    }

    pub fn node_count(&self) -> usize {
        fn count(node: &RadixNode) -> usize {
            1 + node.children.values().map(count).sum::<usize>()
        }
        count(&self.root) - 1 // exclude the root
    }

    /// Donors currently pinned, for shutdown cleanup.
    pub fn all_donors(&self) -> Vec<SequenceId> {
        fn collect(node: &RadixNode, out: &mut Vec<SequenceId>) {
            if let Some(d) = node.donor {
                out.push(d);
            }
            for c in node.children.values() {
                collect(c, out);
            }
        }
        let mut out = Vec::new();
        collect(&self.root, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// LRU caches

/// Small LRU keyed cache: O(1) touch, O(n) eviction scan on overflow.
pub struct LruCache<K, V> {
    capacity: usize,
    clock: u64,
    map: HashMap<K, (V, u64)>,
    pub hits: u64,
    pub misses: u64,
}

impl<K: std::hash::Hash + Eq + Clone, V: Clone> LruCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, clock: 0, map: HashMap::new(), hits: 0, misses: 0 }
    }

    pub fn get(&mut self, key: &K) -> Option<V> {
        self.clock += 1;
        let clock = self.clock;
        match self.map.get_mut(key) {
            Some((v, used)) => {
                *used = clock;
                self.hits += 1;
                Some(v.clone())
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn put(&mut self, key: K, value: V) {
        if self.capacity == 0 {
            return;
        }
        self.clock += 1;
        if self.map.len() >= self.capacity && !self.map.contains_key(&key) {
            if let Some(oldest) =
                self.map.iter().min_by_key(|(_, (_, used))| *used).map(|(k, _)| k.clone())
            {
                self.map.remove(&oldest);
            }
        }
        self.map.insert(key, (value, self.clock));
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.map.contains_key(key)
    }
}

/// Response cache entry: keyed by prompt-token hash, verified against the
/// exact prompt on hit so collisions degrade to misses.
#[derive(Debug, Clone)]
pub struct ResponseEntry {
    pub prompt: Vec<TokenId>,
    pub text: String,
    pub seed: u32,
}

pub struct ResponseCache {
    lru: LruCache<u64, ResponseEntry>,
}

impl ResponseCache {
    pub fn new(capacity: usize) -> Self {
        Self { lru: LruCache::new(capacity) }
    }

    fn key(prompt: &[TokenId]) -> u64 {
        let ids: Vec<u32> = prompt.iter().map(|t| t.0).collect();
        fnv1a64_tokens(&ids)
    }

    pub fn get(&mut self, prompt: &[TokenId]) -> Option<ResponseEntry> {
        let entry = self.lru.get(&Self::key(prompt))?;
        (entry.prompt == prompt).then_some(entry)
    }

    pub fn put(&mut self, prompt: Vec<TokenId>, text: String, seed: u32) {
        self.lru.put(Self::key(&prompt), ResponseEntry { prompt, text, seed });
    }

    pub fn len(&self) -> usize {
        self.lru.len()
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.lru.hits, self.lru.misses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn exhausted_pool_times_out() {
        let pool = SequencePool::new(4, 0);
        let held: Vec<_> =
            (0..4).map(|_| pool.acquire(SeqKind::Transient, Duration::ZERO).unwrap()).collect();
        assert!(matches!(
            pool.acquire(SeqKind::Transient, Duration::ZERO),
            Err(EngineError::SlotTimeout)
        ));
        for id in held {
            pool.release(id);
        }
    }

    #[test]
    fn release_wakes_oldest_waiter() {
        let pool = Arc::new(SequencePool::new(1, 0));
        let first = pool.acquire(SeqKind::Transient, Duration::ZERO).unwrap();
        let (tx, rx) = std::sync::mpsc::channel::<(usize, SequenceId)>();
        let mut handles = Vec::new();
        for i in 0..3 {
            let pool = Arc::clone(&pool);
            let tx = tx.clone();
            handles.push(thread::spawn(move || {
                let id = pool.acquire(SeqKind::Transient, Duration::from_secs(5)).unwrap();
                tx.send((i, id)).unwrap();
                thread::sleep(Duration::from_millis(10));
                pool.release(id);
            }));
            // Stagger arrivals so the FIFO order is deterministic.
            thread::sleep(Duration::from_millis(30));
        }
        pool.release(first);
        let order: Vec<usize> = (0..3).map(|_| rx.recv().unwrap().0).collect();
        assert_eq!(order, vec![0, 1, 2], "oldest waiter wakes first");
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn thousand_cycles_leak_nothing() {
        let pool = SequencePool::new(4, 0);
        for _ in 0..1000 {
            let id = pool.acquire(SeqKind::Transient, Duration::ZERO).unwrap();
            pool.release(id);
        }
        assert_eq!(pool.free_count(SeqKind::Transient), 4);
    }

    /// Independent FNV-1a fold, kept separate from the production hasher.
    fn reference_fnv1a64(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    #[test]
    fn derive_seed_empty_prompt() {
        // Empty prompt: the hash is the offset basis, and the seed is its
        // low 32 bits (0x84222325 = 2216829733).
        assert_eq!(derive_seed(&[]), (reference_fnv1a64(b"") & 0xFFFF_FFFF) as u32);
        assert_eq!(derive_seed(&[]), 2_216_829_733);
    }

    #[test]
    fn derive_seed_matches_reference_fold() {
        let prompt = t(&[3, 1, 500, 42]);
        let mut bytes = Vec::new();
        for tok in &prompt {
            bytes.extend_from_slice(&tok.0.to_le_bytes());
        }
        assert_eq!(derive_seed(&prompt), (reference_fnv1a64(&bytes) & 0xFFFF_FFFF) as u32);
    }

    #[test]
    fn derive_seed_deterministic_and_distinct() {
        let a: Vec<TokenId> = (0..10).map(TokenId).collect();
        assert_eq!(derive_seed(&a), derive_seed(&a));
        let mut collisions = 0;
        let mut rngstate = 1u64;
        for _ in 0..1000 {
            rngstate = rngstate.wrapping_mul(6364136223846793005).wrapping_add(1);
            let i = (rngstate >> 33) as u32 % 10;
            let mut b = a.clone();
            b[i as usize] = TokenId(b[i as usize].0 + 1);
            if derive_seed(&a) == derive_seed(&b) {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0, "tolerated but counted; expect none at this scale");
    }

    fn t(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn radix_match_and_extend() {
        let mut r = RadixCache::new();
        let donor = SequenceId::transient(7);
        r.insert(&t(&[1, 2, 3, 4]), donor);
        let m = r.lookup(&t(&[1, 2, 3, 4, 5, 6]));
        assert_eq!(m.len, 4);
        assert_eq!(m.donor, Some(donor));
        // Unrelated prompt: no match.
        let m2 = r.lookup(&t(&[9, 9]));
        assert_eq!(m2.len, 0);
    }

    #[test]
    fn radix_partial_edge_match() {
        let mut r = RadixCache::new();
        let donor = SequenceId::transient(7);
        r.insert(&t(&[1, 2, 3, 4]), donor);
        let m = r.lookup(&t(&[1, 2, 9]));
        assert_eq!(m.len, 2, "prefix within an edge still restorable");
        assert_eq!(m.donor, Some(donor));
    }

    #[test]
    fn leaf_oldest_eviction_preserves_shared_branch() {
        let mut r = RadixCache::new();
        let shared: Vec<u32> = (0..100).collect();
        let mut a = shared.clone();
        a.push(200);
        let mut b = shared.clone();
        b.push(201);
        r.insert(&t(&a), SequenceId::transient(1));
        r.insert(&t(&b), SequenceId::transient(2));
        // Touch branch b so a is the oldest leaf.
        r.lookup(&t(&b));
        let evicted = r.evict_one().unwrap();
        assert_eq!(evicted, SequenceId::transient(1));
        // The shared interior survives: b still fully matches.
        let m = r.lookup(&t(&b));
        assert_eq!(m.len, 101);
        assert_eq!(m.donor, Some(SequenceId::transient(2)));
    }

    #[test]
    fn insert_replacing_same_path_returns_old_donor() {
        let mut r = RadixCache::new();
        r.insert(&t(&[1, 2]), SequenceId::transient(1));
        let displaced = r.insert(&t(&[1, 2]), SequenceId::transient(2));
        assert_eq!(displaced, Some(SequenceId::transient(1)));
    }

    #[test]
    fn lru_evicts_first_inserted_on_overflow() {
        let mut lru = LruCache::new(3);
        for i in 0..3 {
            lru.put(i, i * 10);
        }
        lru.put(3, 30);
        assert!(!lru.contains(&0), "oldest entry evicted");
        assert_eq!(lru.len(), 3);
    }

    #[test]
    fn lru_touch_protects_entry() {
        let mut lru = LruCache::new(2);
        lru.put(1, "a");
        lru.put(2, "b");
        lru.get(&1);
        lru.put(3, "c");
        assert!(lru.contains(&1));
        assert!(!lru.contains(&2));
    }

    #[test]
    fn response_cache_verifies_prompt_on_hit() {
        let mut rc = ResponseCache::new(8);
        rc.put(t(&[1, 2, 3]), "hello".into(), 42);
        assert_eq!(rc.get(&t(&[1, 2, 3])).unwrap().text, "hello");
        assert!(rc.get(&t(&[1, 2, 4])).is_none());
    }

    proptest::proptest! {
        // Radix lookup agrees with a brute-force longest-common-prefix oracle
        // over the set of inserted sequences.
        #[test]
        fn radix_matches_bruteforce(
            seqs in proptest::collection::vec(proptest::collection::vec(0u32..4, 1..8), 1..12),
            probe in proptest::collection::vec(0u32..4, 0..10),
        ) {
            let mut r = RadixCache::new();
            for (i, s) in seqs.iter().enumerate() {
                r.insert(&t(s), SequenceId::transient(i as u64));
            }
            let got = r.lookup(&t(&probe));
            let want = seqs
                .iter()
                .map(|s| s.iter().zip(&probe).take_while(|(a, b)| a == b).count())
                .max()
                .unwrap_or(0);
            proptest::prop_assert_eq!(got.len, want);
        }
    }
}
