//! Unified KV cell pool.
//!
//! One *cell* is one token's K/V storage in one layer; all occupancy
//! accounting and admission budgets are in cells. Cells are reference
//! counted so that prefix aliasing shares physical storage: an aliased
//! prefix counts once toward occupancy and survives until every referer
//! releases it.

use crate::error::{CoreError, Result};
use crate::hash::Fnv1a64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Region of a session's sequence. Ordered by position within a sequence:
/// all FROZEN positions precede all SLIDING positions precede all EPHEMERAL
/// positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionTag {
    /// Region 0: system prompt, written once at session init.
    Frozen,
    /// Region 1: streaming data buffer, FIFO-evicted.
    Sliding,
    /// Region 2: header + query/response tokens, cleared between queries.
    Ephemeral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqKind {
    Transient,
    Session,
}

/// Identifier of a live sequence in the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceId {
    pub raw: u64,
    pub kind: SeqKind,
}

impl SequenceId {
    pub fn transient(raw: u64) -> Self {
        Self { raw, kind: SeqKind::Transient }
    }

    pub fn session(raw: u64) -> Self {
        Self { raw, kind: SeqKind::Session }
    }
}

struct PhysCell {
    k: Box<[f32]>,
    v: Box<[f32]>,
    refs: u32,
}

struct SeqEntry {
    pos: u32,
    region: RegionTag,
    /// One physical cell per layer.
    cells: Box<[u32]>,
}

#[derive(Default)]
struct SeqState {
    entries: Vec<SeqEntry>,
}

/// Per-region token counts of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionLayout {
    pub frozen_tokens: u64,
    pub sliding_tokens: u64,
    pub ephemeral_tokens: u64,
}

pub struct CellPool {
    layers: usize,
    model_dim: usize,
    capacity_cells: u64,
    used_cells: u64,
    slab: Vec<Option<PhysCell>>,
    free: Vec<u32>,
    seqs: HashMap<SequenceId, SeqState>,
}

impl CellPool {
    pub fn new(layers: usize, model_dim: usize, capacity_cells: u64) -> Self {
        Self {
            layers,
            model_dim,
            capacity_cells,
            used_cells: 0,
            slab: Vec::new(),
            free: Vec::new(),
            seqs: HashMap::new(),
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    /// (used, capacity) in cells. Reads are consistent because all mutation
    /// is funneled through the dispatch worker under the pool lock.
    pub fn occupancy(&self) -> (u64, u64) {
        (self.used_cells, self.capacity_cells)
    }

    pub fn register_sequence(&mut self, seq: SequenceId) -> Result<()> {
        if self.seqs.contains_key(&seq) {
            return Err(CoreError::SequenceExists { seq });
        }
        self.seqs.insert(seq, SeqState::default());
        Ok(())
    }

    pub fn is_registered(&self, seq: SequenceId) -> bool {
        self.seqs.contains_key(&seq)
    }

    /// Drops the sequence and every cell reference it holds.
    pub fn release_sequence(&mut self, seq: SequenceId) -> Result<()> {
        self.seq_remove(seq, 0)?;
        self.seqs.remove(&seq);
        Ok(())
    }

    fn state(&self, seq: SequenceId) -> Result<&SeqState> {
        self.seqs.get(&seq).ok_or(CoreError::UnknownSequence(seq))
    }

    pub fn token_count(&self, seq: SequenceId) -> Result<usize> {
        Ok(self.state(seq)?.entries.len())
    }

    pub fn last_position(&self, seq: SequenceId) -> Result<Option<u32>> {
        Ok(self.state(seq)?.entries.last().map(|e| e.pos))
    }

    pub fn positions(&self, seq: SequenceId) -> Result<Vec<u32>> {
        Ok(self.state(seq)?.entries.iter().map(|e| e.pos).collect())
    }

    pub fn region_layout(&self, seq: SequenceId) -> Result<RegionLayout> {
        let mut layout = RegionLayout::default();
        for e in &self.state(seq)?.entries {
            match e.region {
                RegionTag::Frozen => layout.frozen_tokens += 1,
                RegionTag::Sliding => layout.sliding_tokens += 1,
                RegionTag::Ephemeral => layout.ephemeral_tokens += 1,
            }
        }
        Ok(layout)
    }

    /// Bytes of K/V storage held by the sequence: `2 * L * d * n * 4`.
    pub fn kv_bytes(&self, seq: SequenceId) -> Result<u64> {
        let n = self.token_count(seq)? as u64;
        Ok(kv_cache_bytes(self.layers as u64, self.model_dim as u64, n, 4))
    }

    fn alloc_cell(&mut self) -> u32 {
        let cell = PhysCell {
            k: vec![0.0; self.model_dim].into_boxed_slice(),
            v: vec![0.0; self.model_dim].into_boxed_slice(),
            refs: 1,
        };
        self.used_cells += 1;
        if let Some(id) = self.free.pop() {
            self.slab[id as usize] = Some(cell);
            id
        } else {
            self.slab.push(Some(cell));
            (self.slab.len() - 1) as u32
        }
    }

    fn drop_cell_ref(&mut self, id: u32) {
        let slot = self.slab[id as usize].as_mut().expect("live cell");
        slot.refs -= 1;
        if slot.refs == 0 {
            self.slab[id as usize] = None;
            self.free.push(id);
            self.used_cells -= 1;
        }
    }

    /// Appends one token's (still zeroed) cells at `pos`. Positions must
    /// strictly increase and regions must not regress within the sequence.
    pub fn append_token(&mut self, seq: SequenceId, pos: u32, region: RegionTag) -> Result<()> {
        if self.used_cells + self.layers as u64 > self.capacity_cells {
            return Err(CoreError::PoolExhausted {
                needed: self.layers as u64,
                available: self.capacity_cells - self.used_cells,
            });
        }
        let layers = self.layers;
        {
            let st = self.seqs.get(&seq).ok_or(CoreError::UnknownSequence(seq))?;
            if let Some(last) = st.entries.last() {
                if pos <= last.pos {
                    return Err(CoreError::PositionOrder { seq, pos, last: last.pos });
                }
                if region < last.region {
                    return Err(CoreError::InvalidConfig(format!(
                        "region {:?} would precede {:?} at higher position",
                        region, last.region
                    )));
                }
            }
        }
        let cells: Box<[u32]> = (0..layers).map(|_| self.alloc_cell()).collect();
        let st = self.seqs.get_mut(&seq).expect("checked above");
        st.entries.push(SeqEntry { pos, region, cells });
        Ok(())
    }

    /// Writes K/V into the newest token's cell for `layer`.
    pub fn write_last_cell(&mut self, seq: SequenceId, layer: usize, k: &[f32], v: &[f32]) {
        let st = self.seqs.get(&seq).expect("live sequence");
        let id = st.entries.last().expect("appended token").cells[layer];
        let cell = self.slab[id as usize].as_mut().expect("live cell");
        cell.k.copy_from_slice(k);
        cell.v.copy_from_slice(v);
    }

    /// K/V of every cached token of `seq` in `layer`, in position order.
    /// Includes the newest token, so causal attention over this iterator
    /// covers self-attention at the current position.
    pub fn attention_cells(
        &self,
        seq: SequenceId,
        layer: usize,
    ) -> impl Iterator<Item = (&[f32], &[f32])> {
        let entries = &self.seqs.get(&seq).expect("live sequence").entries;
        entries.iter().map(move |e| {
            let cell = self.slab[e.cells[layer] as usize].as_ref().expect("live cell");
            (&cell.k[..], &cell.v[..])
        })
    }

    /// Frees every cell of `seq` with position >= `from_pos`.
    /// Returns the number of tokens removed.
    pub fn seq_remove(&mut self, seq: SequenceId, from_pos: u32) -> Result<u64> {
        let st = self.seqs.get_mut(&seq).ok_or(CoreError::UnknownSequence(seq))?;
        let cut = st.entries.partition_point(|e| e.pos < from_pos);
        let removed: Vec<SeqEntry> = st.entries.split_off(cut);
        for entry in &removed {
            for &cell in entry.cells.iter() {
                self.drop_cell_ref(cell);
            }
        }
        Ok(removed.len() as u64)
    }

    /// Frees the `n_tokens` lowest-position SLIDING tokens. FROZEN cells are
    /// never touched; remaining positions keep their values (gaps allowed).
    /// Returns the evicted positions.
    pub fn evict_oldest(&mut self, seq: SequenceId, n_tokens: u64) -> Result<Vec<u32>> {
        if n_tokens == 0 {
            return Ok(Vec::new());
        }
        let st = self.seqs.get_mut(&seq).ok_or(CoreError::UnknownSequence(seq))?;
        let start = st.entries.partition_point(|e| e.region == RegionTag::Frozen);
        let sliding = st.entries[start..]
            .iter()
            .take_while(|e| e.region == RegionTag::Sliding)
            .count() as u64;
        if sliding < n_tokens {
            return Err(CoreError::InsufficientSliding { requested: n_tokens, have: sliding });
        }
        let removed: Vec<SeqEntry> =
            st.entries.drain(start..start + n_tokens as usize).collect();
        let mut positions = Vec::with_capacity(removed.len());
        for entry in &removed {
            positions.push(entry.pos);
            for &cell in entry.cells.iter() {
                self.drop_cell_ref(cell);
            }
        }
        Ok(positions)
    }

    /// Shares the donor's first `len_tokens` cells with `target` by
    /// reference. No K/V bytes are copied; occupancy is unchanged.
    pub fn alias_prefix(
        &mut self,
        donor: SequenceId,
        target: SequenceId,
        len_tokens: u64,
    ) -> Result<()> {
        if !self.seqs.contains_key(&target) {
            return Err(CoreError::UnknownSequence(target));
        }
        if !self.seqs[&target].entries.is_empty() {
            return Err(CoreError::AliasTargetNotEmpty { seq: target });
        }
        if len_tokens == 0 {
            return Ok(());
        }
        let donor_st = self.seqs.get(&donor).ok_or(CoreError::UnknownSequence(donor))?;
        let contiguous = donor_st
            .entries
            .iter()
            .enumerate()
            .take_while(|(i, e)| e.pos == *i as u32)
            .count() as u64;
        if contiguous < len_tokens {
            return Err(CoreError::AliasDonorTooShort {
                seq: donor,
                requested: len_tokens,
                have: contiguous,
            });
        }
        let shared: Vec<SeqEntry> = donor_st.entries[..len_tokens as usize]
            .iter()
            .map(|e| SeqEntry { pos: e.pos, region: e.region, cells: e.cells.clone() })
            .collect();
        for entry in &shared {
            for &cell in entry.cells.iter() {
                self.slab[cell as usize].as_mut().expect("live cell").refs += 1;
            }
        }
        self.seqs.get_mut(&target).expect("checked").entries = shared;
        Ok(())
    }

    /// Order-sensitive 64-bit FNV-1a over (position, K bytes, V bytes) of
    /// every cell of `seq`, in position then layer order. Equal digests mean
    /// byte-identical cached state at test scale.
    pub fn digest(&self, seq: SequenceId) -> Result<u64> {
        let st = self.state(seq)?;
        let mut h = Fnv1a64::new();
        for entry in &st.entries {
            h.update_u32(entry.pos);
            for &cell in entry.cells.iter() {
                let cell = self.slab[cell as usize].as_ref().expect("live cell");
                for x in cell.k.iter() {
                    h.update(&x.to_le_bytes());
                }
                for x in cell.v.iter() {
                    h.update(&x.to_le_bytes());
                }
            }
        }
        Ok(h.finish())
    }

    /// Live sequences currently registered.
    pub fn sequence_count(&self) -> usize {
        self.seqs.len()
    }

    #[cfg(debug_assertions)]
    pub fn check_invariants(&self) {
        assert!(self.used_cells <= self.capacity_cells, "occupancy over capacity");
        let live: u64 = self.slab.iter().flatten().count() as u64;
        assert_eq!(live, self.used_cells, "slab/used_cells drift");
        for st in self.seqs.values() {
            for w in st.entries.windows(2) {
                assert!(w[0].pos < w[1].pos, "positions not strictly increasing");
                assert!(w[0].region <= w[1].region, "region order violated");
            }
        }
    }
}

/// KV footprint in bytes for a dense cache: `2 * L * d * n_ctx * dtype`.
pub fn kv_cache_bytes(layers: u64, model_dim: u64, n_ctx: u64, dtype_bytes: u64) -> u64 {
    2 * layers * model_dim * n_ctx * dtype_bytes
}
