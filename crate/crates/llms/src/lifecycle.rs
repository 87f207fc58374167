//! Chunk lifecycle: which chunks to evict and when to swap out.
//!
//! Eviction order is kept in a queue of concatenated sub-queues, one per
//! compression class, heaviest class first: evicting a barely-compressed
//! chunk frees the most memory per pop, and such chunks are also the ones
//! the recompute lane restores most profitably. Within a class the order
//! is least-recently-used first. The queue holds in-memory, unlocked
//! chunks only.
//!
//! Swap-out happens ahead of time: every chunk dirtied by a call is
//! written at the call's return, while the context is still locked, so a
//! later reclaim never has to write in the latency path.

use std::collections::VecDeque;

use crate::chunkstore::{ChunkKey, ChunkStore, CtxId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Entry {
    key: ChunkKey,
    bytes: usize,
}

/// Least-compression-tolerable, recently-used eviction queue.
#[derive(Debug, Default)]
pub struct LctruQueue {
    /// (class ratio, LRU-first sub-queue), sorted by ratio descending.
    classes: Vec<(f64, VecDeque<Entry>)>,
}

impl LctruQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|(_, q)| q.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|(_, q)| q.is_empty())
    }

    /// Total bytes the queue could free.
    pub fn evictable_bytes(&self) -> usize {
        self.classes
            .iter()
            .flat_map(|(_, q)| q.iter())
            .map(|e| e.bytes)
            .sum()
    }

    fn class_queue(&mut self, ratio: f64) -> &mut VecDeque<Entry> {
        match self.classes.iter().position(|(r, _)| *r == ratio) {
            Some(i) => &mut self.classes[i].1,
            None => {
                let at = self
                    .classes
                    .iter()
                    .position(|(r, _)| *r < ratio)
                    .unwrap_or(self.classes.len());
                self.classes.insert(at, (ratio, VecDeque::new()));
                &mut self.classes[at].1
            }
        }
    }

    /// Move each chunk to the tail of its class sub-queue (most recently
    /// used); a chunk whose class changed migrates to the new sub-queue.
    pub fn touch(&mut self, entries: &[(ChunkKey, f64, usize)]) {
        for &(key, ratio, bytes) in entries {
            self.remove(key);
            self.class_queue(ratio).push_back(Entry { key, bytes });
        }
    }

    pub fn remove(&mut self, key: ChunkKey) {
        for (_, q) in self.classes.iter_mut() {
            if let Some(i) = q.iter().position(|e| e.key == key) {
                q.remove(i);
                return;
            }
        }
    }

    /// Drop every entry of one context (it is being locked or deleted).
    pub fn remove_context(&mut self, ctx_id: CtxId) {
        for (_, q) in self.classes.iter_mut() {
            q.retain(|e| e.key.ctx_id != ctx_id);
        }
    }

    /// The full pop order: heaviest class first, LRU first within a class.
    pub fn pop_order(&self) -> Vec<ChunkKey> {
        self.classes
            .iter()
            .flat_map(|(_, q)| q.iter().map(|e| e.key))
            .collect()
    }

    /// Remove and return the minimal prefix of the pop order whose bytes
    /// cover `needed`.
    pub fn pop_for(&mut self, needed: usize) -> Result<Vec<ChunkKey>> {
        let mut take = 0usize;
        let mut covered = 0usize;
        'scan: for (_, q) in &self.classes {
            for e in q {
                if covered >= needed {
                    break 'scan;
                }
                covered += e.bytes;
                take += 1;
            }
        }
        if covered < needed {
            return Err(Error::OutOfMemory { needed, available: covered });
        }
        let mut out = Vec::with_capacity(take);
        for (_, q) in self.classes.iter_mut() {
            while take > 0 && !q.is_empty() {
                out.push(q.pop_front().expect("non-empty").key);
                take -= 1;
            }
        }
        Ok(out)
    }
}

/// Outcome of an ahead-of-time swap-out.
#[derive(Debug, Clone, Default)]
pub struct WriteReport {
    pub chunks_written: usize,
    pub bytes_written: u64,
    /// Some writes failed (disk full); those chunks stay dirty and a later
    /// reclaim will fall back to synchronous writes.
    pub degraded: bool,
}

/// Write every dirty chunk of a context to its swap file at call return,
/// before the lock releases. After this, reclaiming the context's chunks
/// performs zero write I/O.
pub fn aot_swapout(store: &mut ChunkStore, ctx_id: CtxId) -> Result<WriteReport> {
    let dirty = store.context(ctx_id)?.dirty_chunks();
    let mut report = WriteReport::default();
    for chunk_index in dirty {
        match store.write_chunk(ChunkKey { ctx_id, chunk_index }) {
            Ok(bytes) => {
                report.chunks_written += 1;
                report.bytes_written += bytes;
            }
            Err(_) => report.degraded = true,
        }
    }
    Ok(report)
}

/// Lock a context's working set: its chunks leave eviction candidacy for
/// the duration of the call. Fails busy when the working set cannot fit
/// in the budget even after evicting everything unlocked.
pub fn lock(store: &mut ChunkStore, queue: &mut LctruQueue, ctx_id: CtxId) -> Result<()> {
    let working_set = store.context(ctx_id)?.working_set_bytes();
    let other_locked: usize = store
        .contexts()
        .filter(|c| c.locked && c.ctx_id != ctx_id)
        .flat_map(|c| c.chunks.values())
        .filter(|c| c.in_memory())
        .map(|c| c.payload_bytes)
        .sum();
    let budget = store.ledger().budget();
    if working_set + other_locked > budget {
        return Err(Error::Busy { working_set, budget: budget - other_locked });
    }
    store.context_mut(ctx_id)?.locked = true;
    queue.remove_context(ctx_id);
    Ok(())
}

/// Release a context's lock; a no-op if it is not locked. Its in-memory
/// chunks rejoin the queue as the most recently used, stamped with the
/// call's logical time.
pub fn unlock(
    store: &mut ChunkStore,
    queue: &mut LctruQueue,
    ctx_id: CtxId,
    now: u64,
) -> Result<()> {
    let ctx = store.context_mut(ctx_id)?;
    if !ctx.locked {
        return Ok(());
    }
    ctx.locked = false;
    let mut entries = Vec::new();
    for chunk in ctx.chunks.values_mut() {
        if chunk.in_memory() {
            chunk.last_access = now;
            entries.push((chunk.key, chunk.ratio(), chunk.payload_bytes));
        }
    }
    queue.touch(&entries);
    Ok(())
}
