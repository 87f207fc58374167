//! The chunk-wise context memory model.
//!
//! Each context's KV cache is managed as fixed-span chunks (16 tokens by
//! default) that move between memory and per-chunk swap files under a
//! byte budget. The store owns the residency state machine and the four
//! primitives that drive it:
//!
//! - **claim** — account a new in-memory chunk against the budget;
//! - **reclaim** — evict chunks in a caller-supplied order until enough
//!   bytes are free, writing only the ones still dirty;
//! - **load** — restore every missing chunk of a context before
//!   inference, splitting the work between disk reads and recompute and
//!   overlapping the two lanes layer by layer;
//! - **fault** — synchronously restore a single chunk, the exception path
//!   that stays available when a chunk goes missing mid-inference.
//!
//! The prompt/output text of a context is memory-resident and never
//! swapped; it is what makes recompute possible.

pub mod swapfile;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{self, ClassLoad, CostModel};
use crate::quant::{self, QuantizedChunkPayload};
use crate::tinylm::{KvTensor, TinyLm, TokenId, TokenSpan};
use crate::tolerance::DensityLedger;
use swapfile::{ChunkFileReader, LayerSegment, SwapBody, SwapHeader, BITWIDTH_FULL};

/// Default tokens per chunk.
pub const DEFAULT_CHUNK_TOKENS: usize = 16;

/// Context handle.
pub type CtxId = u64;

/// Identity of one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkKey {
    pub ctx_id: CtxId,
    pub chunk_index: u32,
}

/// Where a chunk's payload currently lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    InMemory,
    OnDisk,
    Both,
}

/// Chunk payload: quantized codes or a full-precision transient.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkPayload {
    Quantized(QuantizedChunkPayload),
    Full(Vec<f32>),
}

impl ChunkPayload {
    pub fn bitwidth(&self) -> u8 {
        match self {
            ChunkPayload::Quantized(q) => q.bitwidth,
            ChunkPayload::Full(_) => BITWIDTH_FULL,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match self {
            ChunkPayload::Quantized(q) => q.payload_bytes(),
            ChunkPayload::Full(v) => v.len() * 4,
        }
    }

    pub fn metadata_bytes(&self) -> usize {
        match self {
            ChunkPayload::Quantized(q) => q.metadata_bytes(),
            ChunkPayload::Full(_) => 0,
        }
    }
}

/// Ratio of a bitwidth relative to the 8-bit base.
pub fn bitwidth_ratio(bitwidth: u8) -> f64 {
    f64::from(bitwidth) / 8.0
}

/// One fixed-span block of per-layer K/V with its lifecycle metadata.
#[derive(Debug, Clone)]
pub struct KvChunk {
    pub key: ChunkKey,
    /// Global index of the chunk's first token.
    pub token_start: usize,
    pub token_count: usize,
    /// Present unless the chunk is on disk only.
    pub payload: Option<ChunkPayload>,
    /// Current storage width (8/4/2, or 32 for full precision).
    pub bitwidth: u8,
    /// Payload size in bytes, tracked even while the payload is on disk.
    pub payload_bytes: usize,
    pub metadata_bytes: usize,
    /// Information density; refreshed from the ledger before planning.
    pub density: f64,
    pub residency: Residency,
    pub dirty: bool,
    pub last_access: u64,
}

impl KvChunk {
    pub fn span(&self) -> TokenSpan {
        TokenSpan::new(self.token_start, self.token_start + self.token_count)
    }

    pub fn ratio(&self) -> f64 {
        bitwidth_ratio(self.bitwidth)
    }

    pub fn in_memory(&self) -> bool {
        matches!(self.residency, Residency::InMemory | Residency::Both)
    }
}

/// One LLM context: resident text, chunk table, lock flag, clocks.
#[derive(Debug)]
pub struct ContextState {
    pub ctx_id: CtxId,
    /// Full prompt/output transcript; memory-resident, never swapped.
    pub tokens: Vec<TokenId>,
    /// First global token position still backed by KV.
    pub window_start: usize,
    pub chunks: BTreeMap<u32, KvChunk>,
    pub locked: bool,
    /// Calls served on this context.
    pub clock: u64,
    pub density: DensityLedger,
}

impl ContextState {
    /// Tokens inside the KV window.
    pub fn resident_tokens(&self) -> usize {
        self.tokens.len() - self.window_start
    }

    /// Token ids covering the KV window.
    pub fn resident_text(&self) -> &[TokenId] {
        &self.tokens[self.window_start..]
    }

    /// Total payload bytes of the context's chunks at their current widths.
    pub fn working_set_bytes(&self) -> usize {
        self.chunks.values().map(|c| c.payload_bytes).sum()
    }

    pub fn missing_chunks(&self) -> Vec<u32> {
        self.chunks
            .values()
            .filter(|c| c.residency == Residency::OnDisk)
            .map(|c| c.key.chunk_index)
            .collect()
    }

    pub fn dirty_chunks(&self) -> Vec<u32> {
        self.chunks
            .values()
            .filter(|c| c.dirty)
            .map(|c| c.key.chunk_index)
            .collect()
    }
}

/// Byte accounting against the configured budget.
///
/// `used` counts in-memory chunk payload bytes only; per-channel
/// scale/zero-point metadata is totaled separately.
#[derive(Debug, Clone)]
pub struct MemoryLedger {
    budget: usize,
    used: usize,
    metadata: usize,
}

impl MemoryLedger {
    pub fn new(budget: usize) -> Self {
        Self { budget, used: 0, metadata: 0 }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn free(&self) -> usize {
        self.budget - self.used
    }

    pub fn metadata_overhead(&self) -> usize {
        self.metadata
    }

    pub fn claim(&mut self, payload_bytes: usize, metadata_bytes: usize) -> Result<()> {
        if payload_bytes > self.free() {
            return Err(Error::BudgetExceeded { requested: payload_bytes, free: self.free() });
        }
        self.used += payload_bytes;
        self.metadata += metadata_bytes;
        Ok(())
    }

    pub fn release(&mut self, payload_bytes: usize, metadata_bytes: usize) {
        debug_assert!(self.used >= payload_bytes);
        self.used -= payload_bytes;
        self.metadata -= metadata_bytes.min(self.metadata);
    }
}

/// Outcome of a reclaim pass.
#[derive(Debug, Clone, Default)]
pub struct ReclaimReport {
    pub freed_bytes: usize,
    /// Bytes written synchronously for still-dirty victims; zero when
    /// ahead-of-time swap-out has done its job.
    pub write_bytes: u64,
    pub evicted: Vec<ChunkKey>,
}

/// Outcome of a single-chunk fault.
#[derive(Debug, Clone, Default)]
pub struct FaultReport {
    /// The chunk was already resident; nothing happened.
    pub was_resident: bool,
    pub bytes_read: u64,
    /// Swap file was unusable and the chunk was recomputed instead.
    pub recomputed: bool,
}

/// Outcome of a context load.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub restored_chunks: usize,
    pub read_chunks: usize,
    pub recomputed_chunks: usize,
    /// Payload bytes read from swap files.
    pub bytes_read: u64,
    /// Chunks whose swap file failed and fell back to recompute.
    pub io_fallbacks: usize,
    pub wall_seconds: f64,
}

/// The store: contexts, their chunks, the ledger, and the swap directory.
pub struct ChunkStore {
    chunk_tokens: usize,
    layers: usize,
    heads: usize,
    head_dim: usize,
    ledger: MemoryLedger,
    contexts: BTreeMap<CtxId, ContextState>,
    swap_dir: PathBuf,
}

impl ChunkStore {
    pub fn new(
        budget_bytes: usize,
        swap_dir: &Path,
        chunk_tokens: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        std::fs::create_dir_all(swap_dir)?;
        Ok(Self {
            chunk_tokens,
            layers,
            heads,
            head_dim,
            ledger: MemoryLedger::new(budget_bytes),
            contexts: BTreeMap::new(),
            swap_dir: swap_dir.to_path_buf(),
        })
    }

    pub fn chunk_tokens(&self) -> usize {
        self.chunk_tokens
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    /// Channel count of one token's K+V across all layers.
    pub fn token_channels(&self) -> usize {
        self.layers * 2 * self.heads * self.head_dim
    }

    /// Payload bytes of a chunk of `tokens` tokens at `bitwidth`.
    pub fn chunk_payload_bytes(&self, tokens: usize, bitwidth: u8) -> usize {
        let values = tokens * self.token_channels();
        if bitwidth == BITWIDTH_FULL {
            values * 4
        } else {
            quant::packed_len(values, bitwidth)
        }
    }

    pub fn swap_path(&self, key: ChunkKey) -> PathBuf {
        self.swap_dir.join(key.ctx_id.to_string()).join(format!("{}.llmc", key.chunk_index))
    }

    pub fn context(&self, ctx_id: CtxId) -> Result<&ContextState> {
        self.contexts.get(&ctx_id).ok_or(Error::ContextNotFound(ctx_id))
    }

    pub fn context_mut(&mut self, ctx_id: CtxId) -> Result<&mut ContextState> {
        self.contexts.get_mut(&ctx_id).ok_or(Error::ContextNotFound(ctx_id))
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextState> {
        self.contexts.values()
    }

    pub fn create_context(&mut self, ctx_id: CtxId) -> Result<()> {
        if self.contexts.contains_key(&ctx_id) {
            return Err(Error::InvalidArgument(format!("context {ctx_id} already exists")));
        }
        self.contexts.insert(
            ctx_id,
            ContextState {
                ctx_id,
                tokens: Vec::new(),
                window_start: 0,
                chunks: BTreeMap::new(),
                locked: false,
                clock: 0,
                density: DensityLedger::new(self.layers, self.heads, 0),
            },
        );
        Ok(())
    }

    /// Drop a context: frees its memory, deletes its swap files, and
    /// returns whether it existed.
    pub fn delete_context(&mut self, ctx_id: CtxId) -> Result<bool> {
        let Some(ctx) = self.contexts.remove(&ctx_id) else {
            return Ok(false);
        };
        for chunk in ctx.chunks.values() {
            if chunk.in_memory() {
                self.ledger.release(chunk.payload_bytes, chunk.metadata_bytes);
            }
        }
        let dir = self.swap_dir.join(ctx_id.to_string());
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        Ok(true)
    }

    pub fn chunk(&self, key: ChunkKey) -> Result<&KvChunk> {
        self.context(key.ctx_id)?
            .chunks
            .get(&key.chunk_index)
            .ok_or(Error::ChunkLost { key })
    }

    fn chunk_mut(&mut self, key: ChunkKey) -> Result<&mut KvChunk> {
        self.contexts
            .get_mut(&key.ctx_id)
            .ok_or(Error::ContextNotFound(key.ctx_id))?
            .chunks
            .get_mut(&key.chunk_index)
            .ok_or(Error::ChunkLost { key })
    }

    /// Claim: allocate budget to a brand-new in-memory chunk.
    pub fn claim(
        &mut self,
        key: ChunkKey,
        token_start: usize,
        payload: ChunkPayload,
        now: u64,
    ) -> Result<()> {
        let token_count = match &payload {
            ChunkPayload::Quantized(q) => q.tokens,
            ChunkPayload::Full(v) => v.len() / self.token_channels(),
        };
        let bytes = payload.payload_bytes();
        let meta = payload.metadata_bytes();
        // Ledger first: on failure nothing changes.
        self.ledger.claim(bytes, meta)?;
        let ctx = match self.context_mut(key.ctx_id) {
            Ok(ctx) => ctx,
            Err(e) => {
                self.ledger.release(bytes, meta);
                return Err(e);
            }
        };
        let bitwidth = payload.bitwidth();
        ctx.chunks.insert(
            key.chunk_index,
            KvChunk {
                key,
                token_start,
                token_count,
                bitwidth,
                payload_bytes: bytes,
                metadata_bytes: meta,
                payload: Some(payload),
                density: 0.0,
                residency: Residency::InMemory,
                dirty: true,
                last_access: now,
            },
        );
        Ok(())
    }

    /// Replace an in-memory chunk's payload (partial chunk growth or a
    /// ratio change). The ledger absorbs the size delta.
    pub fn replace_payload(&mut self, key: ChunkKey, payload: ChunkPayload) -> Result<()> {
        let channels = self.token_channels();
        let chunk = self.chunk_mut(key)?;
        if !chunk.in_memory() {
            return Err(Error::InvalidArgument(format!(
                "chunk {key:?} is not in memory"
            )));
        }
        let new_bytes = payload.payload_bytes();
        let new_meta = payload.metadata_bytes();
        let old_bytes = chunk.payload_bytes;
        let old_meta = chunk.metadata_bytes;
        let token_count = match &payload {
            ChunkPayload::Quantized(q) => q.tokens,
            ChunkPayload::Full(v) => v.len() / channels,
        };
        if new_bytes > old_bytes {
            // Net growth must fit the budget.
            if new_bytes - old_bytes > self.ledger.free() {
                return Err(Error::BudgetExceeded {
                    requested: new_bytes - old_bytes,
                    free: self.ledger.free(),
                });
            }
        }
        let chunk = self.chunk_mut(key)?;
        chunk.bitwidth = payload.bitwidth();
        chunk.token_count = token_count;
        chunk.payload_bytes = new_bytes;
        chunk.metadata_bytes = new_meta;
        chunk.payload = Some(payload);
        chunk.dirty = true;
        chunk.residency = Residency::InMemory;
        self.ledger.release(old_bytes, old_meta);
        self.ledger.claim(new_bytes, new_meta).expect("checked above");
        Ok(())
    }

    fn header_for(&self, chunk: &KvChunk) -> SwapHeader {
        SwapHeader {
            ctx_id: chunk.key.ctx_id,
            chunk_index: chunk.key.chunk_index,
            token_start: chunk.token_start as u32,
            token_count: chunk.token_count as u16,
            bitwidth: chunk.bitwidth,
            layers: self.layers as u16,
            heads: self.heads as u16,
            head_dim: self.head_dim as u16,
        }
    }

    fn body_for(&self, chunk: &KvChunk) -> Result<SwapBody> {
        let payload = chunk
            .payload
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("chunk payload not in memory".to_string()))?;
        Ok(match payload {
            ChunkPayload::Quantized(q) => SwapBody {
                scales: q.scales.clone(),
                zero_points: q.zero_points.clone(),
                payload: q.packed.clone(),
            },
            ChunkPayload::Full(values) => {
                let channels = self.token_channels();
                let mut bytes = Vec::with_capacity(values.len() * 4);
                for v in values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                SwapBody {
                    scales: vec![1.0; channels],
                    zero_points: vec![0.0; channels],
                    payload: bytes,
                }
            }
        })
    }

    /// Write one chunk's swap file; the chunk becomes clean with residency
    /// `Both`. Returns the bytes written.
    pub fn write_chunk(&mut self, key: ChunkKey) -> Result<u64> {
        let chunk = self.chunk(key)?;
        let header = self.header_for(chunk);
        let body = self.body_for(chunk)?;
        let written = swapfile::write_file(&self.swap_path(key), &header, &body)?;
        let chunk = self.chunk_mut(key)?;
        chunk.dirty = false;
        chunk.residency = Residency::Both;
        Ok(written)
    }

    /// Drop a chunk's in-memory payload. Dirty chunks are written first;
    /// clean ones transition with zero write I/O. Returns bytes written.
    pub fn evict_chunk(&mut self, key: ChunkKey) -> Result<u64> {
        let chunk = self.chunk(key)?;
        if !chunk.in_memory() {
            return Ok(0);
        }
        let written = if chunk.dirty { self.write_chunk(key)? } else { 0 };
        let chunk = self.chunk_mut(key)?;
        let bytes = chunk.payload_bytes;
        let meta = chunk.metadata_bytes;
        chunk.payload = None;
        chunk.residency = Residency::OnDisk;
        self.ledger.release(bytes, meta);
        Ok(written)
    }

    /// Reclaim: evict chunks in the given order until `needed` bytes are
    /// free in the ledger (not merely freed by this pass).
    pub fn reclaim(&mut self, needed: usize, order: &[ChunkKey]) -> Result<ReclaimReport> {
        let mut report = ReclaimReport::default();
        for &key in order {
            if self.ledger.free() >= needed {
                break;
            }
            let chunk = self.chunk(key)?;
            debug_assert!(
                !self.context(key.ctx_id)?.locked,
                "reclaim candidates must be unlocked"
            );
            if !chunk.in_memory() {
                continue;
            }
            let freed = chunk.payload_bytes;
            report.write_bytes += self.evict_chunk(key)?;
            report.freed_bytes += freed;
            report.evicted.push(key);
        }
        if self.ledger.free() < needed {
            return Err(Error::OutOfMemory {
                needed,
                available: self.ledger.free(),
            });
        }
        Ok(report)
    }

    /// Chunk-major values (channel-major within the chunk) pulled from a
    /// working tensor span.
    pub fn extract_span(&self, kv: &KvTensor, span: TokenSpan) -> Vec<f32> {
        let tokens = span.len();
        let hd = self.head_dim;
        let mut out = Vec::with_capacity(tokens * self.token_channels());
        for l in 0..self.layers {
            for kv_sel in 0..2 {
                for h in 0..self.heads {
                    for d in 0..hd {
                        for t in 0..tokens {
                            let rel = span.start - kv.start() + t;
                            let row = if kv_sel == 0 { kv.k_row(l, rel) } else { kv.v_row(l, rel) };
                            out.push(row[h * hd + d]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Write chunk-major values back into a tensor span (all layers).
    pub fn write_span(&self, kv: &mut KvTensor, span: TokenSpan, values: &[f32]) {
        let tokens = span.len();
        let hd = self.head_dim;
        let mut it = values.iter();
        for l in 0..self.layers {
            for kv_sel in 0..2 {
                for h in 0..self.heads {
                    for d in 0..hd {
                        for t in 0..tokens {
                            let rel = span.start - kv.start() + t;
                            let row = if kv_sel == 0 {
                                kv.k_row_mut(l, rel)
                            } else {
                                kv.v_row_mut(l, rel)
                            };
                            row[h * hd + d] = *it.next().expect("value count matches span");
                        }
                    }
                }
            }
        }
    }

    /// Write one layer's slice of a chunk into the tensor from a swap-file
    /// segment.
    fn write_layer_segment(
        &self,
        kv: &mut KvTensor,
        span: TokenSpan,
        bitwidth: u8,
        seg: &LayerSegment,
    ) -> Result<()> {
        let tokens = span.len();
        let cpl = 2 * self.heads * self.head_dim;
        let values: Vec<f32> = if bitwidth == BITWIDTH_FULL {
            seg.payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect()
        } else {
            let codes = quant::unpack_codes(&seg.payload, tokens * cpl, bitwidth)?;
            let mut vals = Vec::with_capacity(codes.len());
            for ch in 0..cpl {
                let s = f64::from(seg.scales[ch]);
                let z = f64::from(seg.zero_points[ch]);
                for t in 0..tokens {
                    vals.push((f64::from(codes[ch * tokens + t]) * s + z) as f32);
                }
            }
            vals
        };
        let hd = self.head_dim;
        let mut it = values.iter();
        for kv_sel in 0..2 {
            for h in 0..self.heads {
                for d in 0..hd {
                    for t in 0..tokens {
                        let rel = span.start - kv.start() + t;
                        let row = if kv_sel == 0 {
                            kv.k_row_mut(seg.layer, rel)
                        } else {
                            kv.v_row_mut(seg.layer, rel)
                        };
                        row[h * hd + d] = *it.next().expect("segment length matches span");
                    }
                }
            }
        }
        Ok(())
    }

    /// Quantize a tensor span at `bitwidth` (or capture it at full
    /// precision) into a payload.
    pub fn payload_from_span(
        &self,
        kv: &KvTensor,
        span: TokenSpan,
        bitwidth: u8,
    ) -> Result<ChunkPayload> {
        let values = self.extract_span(kv, span);
        Ok(if bitwidth == BITWIDTH_FULL {
            ChunkPayload::Full(values)
        } else {
            ChunkPayload::Quantized(quant::quantize(&values, span.len(), bitwidth)?)
        })
    }

    /// Reconstructed values of a payload, chunk-major.
    pub fn payload_values(&self, payload: &ChunkPayload) -> Result<Vec<f32>> {
        Ok(match payload {
            ChunkPayload::Quantized(q) => quant::dequantize(q)?,
            ChunkPayload::Full(v) => v.clone(),
        })
    }

    /// Build the working tensor for a context from its in-memory chunks.
    ///
    /// Chunks still on disk leave zero-filled holes; `load` fills them.
    pub fn materialize(&self, ctx_id: CtxId) -> Result<KvTensor> {
        let ctx = self.context(ctx_id)?;
        let mut kv = KvTensor::new(self.layers, self.heads, self.head_dim, ctx.window_start);
        kv.grow(ctx.resident_tokens());
        for chunk in ctx.chunks.values() {
            if let Some(payload) = &chunk.payload {
                let values = self.payload_values(payload)?;
                self.write_span(&mut kv, chunk.span(), &values);
            }
        }
        Ok(kv)
    }

    /// Load: restore every missing chunk of a context, reading some from
    /// swap files and recomputing the rest per the cost model, with the
    /// two lanes overlapped layer by layer. Returns the fully materialized
    /// working tensor alongside the report.
    ///
    /// Memory headroom must already be secured (see `reclaim`); chunks
    /// restored by recompute are re-quantized at their assigned bitwidth.
    /// A chunk whose swap file is missing or corrupt falls back to
    /// recompute; if its text is gone too the context is unrecoverable.
    pub fn load(
        &mut self,
        ctx_id: CtxId,
        lm: &TinyLm,
        cost: &CostModel,
        recompute_enabled: bool,
        now: u64,
    ) -> Result<(KvTensor, LoadReport)> {
        let t0 = std::time::Instant::now();
        let missing = self.context(ctx_id)?.missing_chunks();
        let mut kv = self.materialize(ctx_id)?;
        if missing.is_empty() {
            return Ok((kv, LoadReport { wall_seconds: t0.elapsed().as_secs_f64(), ..Default::default() }));
        }

        // Headroom check before any work.
        let needed: usize = {
            let ctx = self.context(ctx_id)?;
            missing.iter().map(|i| ctx.chunks[i].payload_bytes).sum()
        };
        if needed > self.ledger.free() {
            return Err(Error::BudgetExceeded { requested: needed, free: self.ledger.free() });
        }

        // Split the missing set: group by compression class, plan the
        // recompute counts, then take the lowest-index chunks of each
        // class for the recompute lane.
        let mut by_class: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
        {
            let ctx = self.context(ctx_id)?;
            for &i in &missing {
                by_class.entry(ctx.chunks[&i].bitwidth).or_default().push(i);
            }
        }
        let classes: Vec<ClassLoad> = by_class
            .iter()
            .map(|(&bw, idxs)| {
                let ctx = self.context(ctx_id).expect("context exists");
                let total: u64 = idxs.iter().map(|i| ctx.chunks[i].payload_bytes as u64).sum();
                ClassLoad {
                    ratio: bitwidth_ratio(bw),
                    chunks: idxs.len(),
                    bytes_per_chunk: total / idxs.len() as u64,
                }
            })
            .collect();
        let plan = if recompute_enabled {
            pipeline::plan(cost, &classes)
        } else {
            pipeline::plan(&CostModel::synthetic(f64::INFINITY, cost.b_io.max(1e-12)), &classes)
        };
        let mut recompute_set: Vec<u32> = Vec::new();
        for (class, re_count) in &plan.classes {
            let bw = (class.ratio * 8.0).round() as u8;
            let idxs = by_class.get(&bw).cloned().unwrap_or_default();
            recompute_set.extend(idxs.into_iter().take(*re_count));
        }
        recompute_set.sort_unstable();
        let io_set: Vec<u32> = missing
            .iter()
            .copied()
            .filter(|i| !recompute_set.contains(i))
            .collect();

        let io_meta: Vec<(u32, u8, TokenSpan, PathBuf)> = {
            let ctx = self.context(ctx_id)?;
            io_set
                .iter()
                .map(|&i| {
                    let c = &ctx.chunks[&i];
                    (i, c.bitwidth, c.span(), self.swap_path(c.key))
                })
                .collect()
        };
        // The recompute lane works through its chunks strictly position-
        // ascending, one chunk at a time: recompute all layers, quantize
        // at the chunk's width, and write the stored view back into the
        // working rows before the next chunk starts. That reproduces the
        // original decode timeline, where each chunk was quantized at
        // completion and later tokens consumed the quantized view — so at
        // ratio 1 a recomputed chunk's payload is bit-identical to the one
        // on disk. A chunk may step layer `l` only once layer `l`'s reads
        // have landed (its tokens attend over the read-in rows).
        let resident_ids: Vec<TokenId> = self.context(ctx_id)?.resident_text().to_vec();
        let recompute_meta: Vec<(u32, u8, TokenSpan)> = {
            let ctx = self.context(ctx_id)?;
            recompute_set
                .iter()
                .map(|&i| {
                    let c = &ctx.chunks[&i];
                    (i, c.bitwidth, c.span())
                })
                .collect()
        };

        enum IoOutcome {
            Segment(u32, LayerSegment),
            Failed(u32),
        }
        let layers = self.layers;
        let store = &*self;
        let mut readers: Vec<(u32, Option<ChunkFileReader>)> = Vec::new();
        let mut segments: BTreeMap<u32, Vec<LayerSegment>> = BTreeMap::new();
        let mut fallbacks: Vec<u32> = Vec::new();
        let mut clean = true;
        let mut pending: std::collections::VecDeque<(u32, u8, TokenSpan)> =
            recompute_meta.iter().copied().collect();
        let mut current: Option<(u32, u8, TokenSpan, crate::tinylm::TokenBatch<'_>)> = None;
        let mut recompute_payloads: BTreeMap<u32, ChunkPayload> = BTreeMap::new();

        let io_meta_ref = &io_meta;
        let wall = pipeline::execute_overlapped(
            layers,
            move |layer| {
                if layer == 0 {
                    for (idx, _, _, path) in io_meta_ref {
                        readers.push((*idx, ChunkFileReader::open(path).ok()));
                    }
                }
                let mut out = Vec::new();
                for (idx, reader) in readers.iter_mut() {
                    match reader {
                        Some(r) => match r.read_layer(layer) {
                            Ok(seg) => out.push(IoOutcome::Segment(*idx, seg)),
                            Err(_) => {
                                out.push(IoOutcome::Failed(*idx));
                                *reader = None;
                            }
                        },
                        None => {
                            if layer == 0 {
                                out.push(IoOutcome::Failed(*idx));
                            }
                        }
                    }
                }
                Ok(out)
            },
            |layer, outcomes| {
                for outcome in outcomes {
                    match outcome {
                        IoOutcome::Segment(idx, seg) => {
                            let (_, bw, span, _) =
                                io_meta.iter().find(|m| m.0 == idx).expect("io chunk meta");
                            store.write_layer_segment(&mut kv, *span, *bw, &seg)?;
                            segments.entry(idx).or_default().push(seg);
                        }
                        IoOutcome::Failed(idx) => {
                            if !fallbacks.contains(&idx) {
                                fallbacks.push(idx);
                                clean = false;
                            }
                        }
                    }
                }
                if !clean {
                    // A failed read taints in-flight recompute state; the
                    // whole lane is redone after the pipeline.
                    return Ok(());
                }
                let arrived = layer + 1;
                loop {
                    if current.is_none() {
                        match pending.pop_front() {
                            Some((idx, bw, span)) => {
                                let mut rels = Vec::new();
                                let mut ids = Vec::new();
                                for pos in span.start..span.end {
                                    let rel = pos - kv.start();
                                    rels.push(rel);
                                    ids.push(resident_ids[rel]);
                                }
                                current = Some((idx, bw, span, lm.begin_batch(rels, ids)?));
                            }
                            None => break,
                        }
                    }
                    let (idx, bw, span, batch) = current.as_mut().expect("current chunk set");
                    while batch.layers_done() < arrived {
                        batch.step_layer(&mut kv, &mut crate::tinylm::NoSink)?;
                    }
                    if batch.layers_done() == layers {
                        let payload = store.payload_from_span(&kv, *span, *bw)?;
                        let values = store.payload_values(&payload)?;
                        store.write_span(&mut kv, *span, &values);
                        recompute_payloads.insert(*idx, payload);
                        current = None;
                    } else {
                        break;
                    }
                }
                Ok(())
            },
        )?;

        // Exception path: redo the entire recompute lane plus the fallback
        // chunks, position-ascending, over the rows that did arrive.
        let mut report = LoadReport::default();
        if !clean {
            let mut todo = recompute_meta.clone();
            {
                let ctx = self.context(ctx_id)?;
                for &idx in &fallbacks {
                    let c = &ctx.chunks[&idx];
                    todo.push((idx, c.bitwidth, c.span()));
                }
            }
            todo.sort_by_key(|t| t.0);
            recompute_payloads.clear();
            for (idx, bw, span) in &todo {
                kv = lm.recompute_chunks(&kv, &[*span], &resident_ids)?;
                let payload = self.payload_from_span(&kv, *span, *bw)?;
                let values = self.payload_values(&payload)?;
                self.write_span(&mut kv, *span, &values);
                recompute_payloads.insert(*idx, payload);
            }
            report.io_fallbacks = fallbacks.len();
        }

        // Commit: I/O chunks keep their on-disk payload (clean, Both);
        // recomputed ones carry a fresh payload (dirty, memory only).
        for (idx, bw, span, _) in &io_meta {
            if fallbacks.contains(idx) {
                continue;
            }
            let segs = segments.remove(idx).expect("all layers arrived");
            let mut scales = Vec::new();
            let mut zps = Vec::new();
            let mut packed = Vec::new();
            for seg in segs {
                scales.extend(seg.scales);
                zps.extend(seg.zero_points);
                packed.extend(seg.payload);
            }
            let payload = if *bw == BITWIDTH_FULL {
                ChunkPayload::Full(
                    packed
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                ChunkPayload::Quantized(QuantizedChunkPayload {
                    bitwidth: *bw,
                    tokens: span.len(),
                    channels: self.token_channels(),
                    scales,
                    zero_points: zps,
                    packed,
                })
            };
            let bytes = payload.payload_bytes() as u64;
            let key = ChunkKey { ctx_id, chunk_index: *idx };
            self.ledger.claim(payload.payload_bytes(), payload.metadata_bytes())?;
            let chunk = self.chunk_mut(key)?;
            chunk.payload = Some(payload);
            chunk.residency = Residency::Both;
            chunk.dirty = false;
            chunk.last_access = now;
            report.bytes_read += bytes;
            report.read_chunks += 1;
        }
        for (idx, payload) in recompute_payloads {
            let key = ChunkKey { ctx_id, chunk_index: idx };
            self.ledger.claim(payload.payload_bytes(), payload.metadata_bytes())?;
            let chunk = self.chunk_mut(key)?;
            chunk.payload = Some(payload);
            chunk.residency = Residency::InMemory;
            chunk.dirty = true;
            chunk.last_access = now;
            report.recomputed_chunks += 1;
        }

        report.restored_chunks = missing.len();
        report.wall_seconds = t0.elapsed().as_secs_f64().max(wall);
        Ok((kv, report))
    }

    /// Fault: synchronously restore one chunk. A no-op when it is already
    /// resident; falls back to recompute when the swap file is unusable,
    /// which requires every other chunk of the context to be in memory.
    pub fn fault(&mut self, key: ChunkKey, lm: &TinyLm, now: u64) -> Result<FaultReport> {
        let chunk = self.chunk(key)?;
        if chunk.in_memory() {
            return Ok(FaultReport { was_resident: true, ..Default::default() });
        }
        let span = chunk.span();
        let bitwidth = chunk.bitwidth;
        match swapfile::read_file(&self.swap_path(key)) {
            Ok((header, body)) => {
                let payload = if header.bitwidth == BITWIDTH_FULL {
                    ChunkPayload::Full(
                        body.payload
                            .chunks_exact(4)
                            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                            .collect(),
                    )
                } else {
                    ChunkPayload::Quantized(swapfile::body_to_quantized(&header, &body)?)
                };
                let bytes = payload.payload_bytes() as u64;
                self.ledger.claim(payload.payload_bytes(), payload.metadata_bytes())?;
                let chunk = self.chunk_mut(key)?;
                chunk.payload = Some(payload);
                chunk.residency = Residency::Both;
                chunk.dirty = false;
                chunk.last_access = now;
                Ok(FaultReport { bytes_read: bytes, ..Default::default() })
            }
            Err(_) => {
                // Recompute fallback: every other chunk must be resident.
                let ctx = self.context(key.ctx_id)?;
                if ctx
                    .chunks
                    .values()
                    .any(|c| c.key != key && !c.in_memory())
                {
                    return Err(Error::ChunkLost { key });
                }
                let resident_ids = ctx.resident_text().to_vec();
                let kv = self.materialize(key.ctx_id)?;
                let kv = lm.recompute_chunks(&kv, &[span], &resident_ids)?;
                let payload = self.payload_from_span(&kv, span, bitwidth)?;
                self.ledger.claim(payload.payload_bytes(), payload.metadata_bytes())?;
                let chunk = self.chunk_mut(key)?;
                chunk.payload = Some(payload);
                chunk.residency = Residency::InMemory;
                chunk.dirty = true;
                chunk.last_access = now;
                Ok(FaultReport { recomputed: true, ..Default::default() })
            }
        }
    }

    /// Rebuild a context from its swap files plus the resident transcript
    /// (crash recovery). Recovered chunks come back on-disk; densities
    /// restart and refill as attention flows again. Returns the number of
    /// chunk files found.
    pub fn recover_context(
        &mut self,
        ctx_id: CtxId,
        tokens: Vec<TokenId>,
        window_start: usize,
    ) -> Result<usize> {
        self.create_context(ctx_id)?;
        let dir = self.swap_dir.join(ctx_id.to_string());
        let mut found = 0usize;
        if dir.exists() {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            paths.sort();
            for path in paths {
                let Ok((header, _)) = swapfile::read_file(&path) else {
                    continue;
                };
                if header.ctx_id != ctx_id {
                    continue;
                }
                let key = ChunkKey { ctx_id, chunk_index: header.chunk_index };
                let metadata_bytes =
                    if header.bitwidth == BITWIDTH_FULL { 0 } else { header.channels() * 8 };
                let payload_bytes = header.payload_len();
                self.context_mut(ctx_id)?.chunks.insert(
                    header.chunk_index,
                    KvChunk {
                        key,
                        token_start: header.token_start as usize,
                        token_count: header.token_count as usize,
                        payload: None,
                        bitwidth: header.bitwidth,
                        payload_bytes,
                        metadata_bytes,
                        density: 0.0,
                        residency: Residency::OnDisk,
                        dirty: false,
                        last_access: 0,
                    },
                );
                found += 1;
            }
        }
        let resident = tokens.len() - window_start;
        let ctx = self.context_mut(ctx_id)?;
        ctx.tokens = tokens;
        ctx.window_start = window_start;
        ctx.density.seed(window_start, resident);
        Ok(found)
    }

    /// Drop the oldest whole chunks once the context outgrows its window.
    /// Dropped chunks disappear from memory, disk, and the ledger;
    /// surviving tokens keep their global positions.
    pub fn slide_window(&mut self, ctx_id: CtxId, max_window: usize) -> Result<Vec<u32>> {
        let mut dropped = Vec::new();
        loop {
            let ctx = self.context(ctx_id)?;
            if ctx.resident_tokens() < max_window + self.chunk_tokens {
                break;
            }
            let first_index = (ctx.window_start / self.chunk_tokens) as u32;
            let key = ChunkKey { ctx_id, chunk_index: first_index };
            let chunk_tokens = self.chunk_tokens;
            let ctx = self.context_mut(ctx_id)?;
            if let Some(chunk) = ctx.chunks.remove(&first_index) {
                debug_assert_eq!(chunk.token_count, chunk_tokens);
                ctx.window_start += chunk.token_count;
                ctx.density.drop_front(chunk.token_count);
                if chunk.in_memory() {
                    self.ledger.release(chunk.payload_bytes, chunk.metadata_bytes);
                }
                let path = self.swap_path(key);
                if path.exists() {
                    std::fs::remove_file(&path)?;
                }
            } else {
                // No chunk covers the window head yet (tokens not chunked);
                // nothing can be dropped.
                break;
            }
            dropped.push(first_index);
        }
        Ok(dropped)
    }
}

#[cfg(test)]
mod tests;
