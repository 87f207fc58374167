//! The live serving engine.
//!
//! One call runs the full lifecycle: lock the context's working set,
//! reclaim headroom, restore missing chunks through the overlapped
//! swap/recompute loader, prefill the new prompt, decode, snapshot and
//! re-plan chunk compression, swap dirty chunks out ahead of time, and
//! unlock. Switch latency — arrival until every chunk is resident — is
//! reported separately from decode time.
//!
//! Inference always consumes the dequantized view of what the store
//! holds: a chunk is quantized once, when it completes, and its working
//! rows are immediately replaced by the dequantized values. The trailing
//! partial chunk is the exception — its rows are re-derived fresh from
//! text at call start so that the chunk, once complete, quantizes from
//! the same values no matter how often it was swapped in between. With a
//! global ratio of 1 this makes eviction completely invisible to the
//! produced token ids, whichever mix of reads and recompute restored the
//! chunks.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::chunkstore::swapfile::BITWIDTH_FULL;
use crate::chunkstore::{
    ChunkKey, ChunkPayload, ChunkStore, CtxId, LoadReport, DEFAULT_CHUNK_TOKENS,
};
use crate::error::{Error, Result};
use crate::lifecycle::{self, LctruQueue, WriteReport};
use crate::pipeline::CostModel;
use crate::tinylm::{KvTensor, TinyLm, TinyLmConfig, TokenId, TokenSpan};
use crate::tolerance;

/// Everything the engine needs to know at construction.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub model: TinyLmConfig,
    pub budget_bytes: usize,
    pub chunk_tokens: usize,
    /// Sliding-window length in tokens; resident length stays below
    /// `max_window + chunk_tokens`.
    pub max_window: usize,
    /// Base storage width for chunk payloads; `None` keeps chunks at full
    /// precision (compression disabled).
    pub base_bitwidth: Option<u8>,
    /// Compression ratio levels, strictly descending.
    pub ratios: Vec<f64>,
    /// Global average compression ratio target.
    pub ratio_global: f64,
    /// Default decode cap per call.
    pub max_new_tokens: usize,
    pub eos_token: Option<TokenId>,
    /// Allow the loader to restore chunks by recompute.
    pub recompute_enabled: bool,
    pub cost: CostModel,
    pub swap_dir: PathBuf,
}

impl EngineConfig {
    pub fn new(swap_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: TinyLmConfig::small(0x11a5),
            budget_bytes: 64 << 20,
            chunk_tokens: DEFAULT_CHUNK_TOKENS,
            max_window: 1024,
            base_bitwidth: Some(8),
            ratios: vec![1.0, 0.5, 0.25],
            ratio_global: 0.5,
            max_new_tokens: 32,
            eos_token: None,
            recompute_enabled: true,
            cost: CostModel::default_calibrated(),
            swap_dir: swap_dir.into(),
        }
    }
}

/// What one call produced.
#[derive(Debug, Clone)]
pub struct CallOutcome {
    /// Generated token ids (decode output only, prompt excluded).
    pub tokens: Vec<TokenId>,
    /// Arrival to all-chunks-resident.
    pub switch_latency: Duration,
    pub decode_seconds: f64,
    /// Mid-inference single-chunk faults; zero in normal operation.
    pub faults: usize,
    pub load: LoadReport,
    pub aot: WriteReport,
}

/// Fault-injection hook run at each decode iteration (test instrumentation).
pub type DecodeHook = Box<dyn FnMut(&mut ChunkStore, CtxId, usize) + Send>;

pub struct Engine {
    cfg: EngineConfig,
    lm: TinyLm,
    store: ChunkStore,
    queue: LctruQueue,
    /// Global logical call counter; the store's notion of time.
    clock: u64,
    next_ctx: CtxId,
    decode_hook: Option<DecodeHook>,
}

fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Engine> {
        if let Some(bw) = cfg.base_bitwidth {
            if !crate::quant::SUPPORTED_BITWIDTHS.contains(&bw) {
                return Err(Error::InvalidArgument(format!("base bitwidth {bw}")));
            }
        }
        if cfg.max_window + cfg.chunk_tokens > cfg.model.max_seq {
            return Err(Error::InvalidArgument(format!(
                "window {} + chunk {} exceeds model capacity {}",
                cfg.max_window, cfg.chunk_tokens, cfg.model.max_seq
            )));
        }
        let lm = TinyLm::new(cfg.model);
        let store = ChunkStore::new(
            cfg.budget_bytes,
            &cfg.swap_dir,
            cfg.chunk_tokens,
            cfg.model.layers,
            cfg.model.heads,
            cfg.model.head_dim,
        )?;
        Ok(Engine {
            cfg,
            lm,
            store,
            queue: LctruQueue::new(),
            clock: 0,
            next_ctx: 1,
            decode_hook: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ChunkStore {
        &self.store
    }

    pub fn model(&self) -> &TinyLm {
        &self.lm
    }

    /// Install a per-decode-iteration fault-injection hook.
    pub fn set_decode_hook(&mut self, hook: Option<DecodeHook>) {
        self.decode_hook = hook;
    }

    /// Create a context; a non-empty system prompt is prefilled through
    /// the model (chunks created, densities seeded).
    pub fn new_ctx(&mut self, system_prompt: &[TokenId]) -> Result<CtxId> {
        let ctx_id = self.next_ctx;
        self.next_ctx += 1;
        self.store.create_context(ctx_id)?;
        if !system_prompt.is_empty() {
            if let Err(e) = self.serve(ctx_id, system_prompt, 0) {
                let _ = self.delete_ctx(ctx_id);
                return Err(e);
            }
        }
        Ok(ctx_id)
    }

    /// Serve one prompt on a context with the default decode cap.
    pub fn call(&mut self, ctx_id: CtxId, prompt: &[TokenId]) -> Result<CallOutcome> {
        self.call_with_cap(ctx_id, prompt, self.cfg.max_new_tokens)
    }

    /// Serve one prompt with an explicit decode cap.
    pub fn call_with_cap(
        &mut self,
        ctx_id: CtxId,
        prompt: &[TokenId],
        decode_cap: usize,
    ) -> Result<CallOutcome> {
        self.serve(ctx_id, prompt, decode_cap)
    }

    /// Delete a context: memory, ledger, and swap files all go.
    /// Returns whether the context existed.
    pub fn delete_ctx(&mut self, ctx_id: CtxId) -> Result<bool> {
        self.queue.remove_context(ctx_id);
        self.store.delete_context(ctx_id)
    }

    /// Push a chunk of a context out of memory (test instrumentation for
    /// the fault path).
    pub fn force_evict(&mut self, ctx_id: CtxId, chunk_index: u32) -> Result<u64> {
        let key = ChunkKey { ctx_id, chunk_index };
        self.queue.remove(key);
        self.store.evict_chunk(key)
    }

    fn serve(&mut self, ctx_id: CtxId, prompt: &[TokenId], decode_cap: usize) -> Result<CallOutcome> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".to_string()));
        }
        self.clock += 1;
        let now = self.clock;
        let t0 = Instant::now();
        lifecycle::lock(&mut self.store, &mut self.queue, ctx_id)?;
        let out = self.serve_locked(ctx_id, prompt, decode_cap, now, t0);
        if out.is_err() {
            let _ = lifecycle::unlock(&mut self.store, &mut self.queue, ctx_id, now);
        }
        out
    }

    fn serve_locked(
        &mut self,
        ctx_id: CtxId,
        prompt: &[TokenId],
        decode_cap: usize,
        now: u64,
        t0: Instant,
    ) -> Result<CallOutcome> {
        // Headroom for the missing chunks, then the pipelined load.
        let missing_bytes: usize = {
            let ctx = self.store.context(ctx_id)?;
            ctx.missing_chunks()
                .iter()
                .map(|i| ctx.chunks[i].payload_bytes)
                .sum()
        };
        self.ensure_free(missing_bytes)?;
        let (mut kv, load) = self.store.load(
            ctx_id,
            &self.lm,
            &self.cfg.cost,
            self.cfg.recompute_enabled,
            now,
        )?;
        let switch_latency = t0.elapsed();

        // The trailing partial chunk decodes from fresh values, not from
        // its snapshot payload, so that completing it later quantizes the
        // same values regardless of swap history.
        if self.cfg.base_bitwidth.is_some() {
            let partial = self
                .store
                .context(ctx_id)?
                .chunks
                .values()
                .next_back()
                .filter(|c| c.token_count < self.cfg.chunk_tokens)
                .map(|c| c.span());
            if let Some(span) = partial {
                let text = self.store.context(ctx_id)?.resident_text().to_vec();
                kv = self.lm.recompute_chunks(&kv, &[span], &text)?;
            }
        }

        let mut last_logits = Vec::new();
        for &t in prompt {
            last_logits = self.push_token(ctx_id, &mut kv, t, now)?;
        }

        let decode_t0 = Instant::now();
        let mut generated = Vec::new();
        let mut faults = 0usize;
        for step in 0..decode_cap {
            if self.decode_hook.is_some() {
                if let Some(mut hook) = self.decode_hook.take() {
                    hook(&mut self.store, ctx_id, step);
                    self.decode_hook = Some(hook);
                }
            }
            faults += self.fault_missing(ctx_id, &mut kv, now)?;
            let next = argmax(&last_logits);
            if Some(next) == self.cfg.eos_token {
                break;
            }
            generated.push(next);
            last_logits = self.push_token(ctx_id, &mut kv, next, now)?;
        }
        let decode_seconds = decode_t0.elapsed().as_secs_f64();

        self.snapshot_partial(ctx_id, &kv, now)?;
        self.replan_compression(ctx_id)?;
        let aot = lifecycle::aot_swapout(&mut self.store, ctx_id)?;
        self.store.context_mut(ctx_id)?.clock += 1;
        lifecycle::unlock(&mut self.store, &mut self.queue, ctx_id, now)?;

        Ok(CallOutcome {
            tokens: generated,
            switch_latency,
            decode_seconds,
            faults,
            load,
            aot,
        })
    }

    /// Evict until at least `bytes` are free.
    fn ensure_free(&mut self, bytes: usize) -> Result<()> {
        let free = self.store.ledger().free();
        if bytes > free {
            let order = self.queue.pop_for(bytes - free)?;
            self.store.reclaim(bytes - free, &order)?;
        }
        Ok(())
    }

    /// Append one token: transcript, KV, density rows, chunk completion,
    /// window slide. Returns the next-token logits.
    fn push_token(
        &mut self,
        ctx_id: CtxId,
        kv: &mut KvTensor,
        token: TokenId,
        now: u64,
    ) -> Result<Vec<f32>> {
        let resident_end;
        let logits;
        {
            let ctx = self.store.context_mut(ctx_id)?;
            ctx.tokens.push(token);
            resident_end = ctx.tokens.len();
            logits = self.lm.forward_step(kv, token, &mut ctx.density)?;
        }

        if resident_end % self.cfg.chunk_tokens == 0 {
            let span = TokenSpan::new(resident_end - self.cfg.chunk_tokens, resident_end);
            self.complete_chunk(ctx_id, kv, span, now)?;
        }

        if self.store.context(ctx_id)?.resident_tokens()
            >= self.cfg.max_window + self.cfg.chunk_tokens
        {
            let dropped = self.store.slide_window(ctx_id, self.cfg.max_window)?;
            for idx in &dropped {
                self.queue.remove(ChunkKey { ctx_id, chunk_index: *idx });
            }
            kv.drop_front(dropped.len() * self.cfg.chunk_tokens);
        }
        Ok(logits)
    }

    /// A chunk just filled up: quantize it once, store it, and replace the
    /// working rows with the stored view.
    fn complete_chunk(
        &mut self,
        ctx_id: CtxId,
        kv: &mut KvTensor,
        span: TokenSpan,
        now: u64,
    ) -> Result<()> {
        let bw = self.cfg.base_bitwidth.unwrap_or(BITWIDTH_FULL);
        let payload = self.store.payload_from_span(kv, span, bw)?;
        let values = self.store.payload_values(&payload)?;
        self.store.write_span(kv, span, &values);

        let idx = (span.start / self.cfg.chunk_tokens) as u32;
        let key = ChunkKey { ctx_id, chunk_index: idx };
        if self.store.context(ctx_id)?.chunks.contains_key(&idx) {
            self.replace_with_reclaim(key, payload)
        } else {
            self.claim_with_reclaim(key, span.start, payload, now)
        }
    }

    /// Snapshot the trailing partial chunk (held at the base width, exempt
    /// from further compression until full).
    fn snapshot_partial(&mut self, ctx_id: CtxId, kv: &KvTensor, now: u64) -> Result<()> {
        let ct = self.cfg.chunk_tokens;
        let end = self.store.context(ctx_id)?.tokens.len();
        let rem = end % ct;
        if rem == 0 {
            return Ok(());
        }
        let span = TokenSpan::new(end - rem, end);
        let bw = self.cfg.base_bitwidth.unwrap_or(BITWIDTH_FULL);
        let payload = self.store.payload_from_span(kv, span, bw)?;
        let idx = (span.start / ct) as u32;
        let key = ChunkKey { ctx_id, chunk_index: idx };
        let existing = self
            .store
            .context(ctx_id)?
            .chunks
            .get(&idx)
            .and_then(|c| c.payload.clone());
        if existing.as_ref() == Some(&payload) {
            return Ok(());
        }
        if existing.is_some() {
            self.replace_with_reclaim(key, payload)
        } else {
            self.claim_with_reclaim(key, span.start, payload, now)
        }
    }

    /// Recompute densities and ratio assignments over the full chunks;
    /// chunks assigned a lower ratio than they currently hold are
    /// re-quantized down. Runs at call return, right before swap-out.
    fn replan_compression(&mut self, ctx_id: CtxId) -> Result<()> {
        let Some(base) = self.cfg.base_bitwidth else {
            return Ok(());
        };
        let ct = self.cfg.chunk_tokens;
        let pairs: Vec<(u32, f64)> = {
            let ctx = self.store.context(ctx_id)?;
            let all = ctx.density.chunk_densities(ct);
            let idxs: Vec<u32> = ctx.chunks.keys().copied().collect();
            debug_assert_eq!(all.len(), idxs.len());
            idxs.into_iter()
                .zip(all)
                .filter(|(idx, _)| ctx.chunks[idx].token_count == ct)
                .collect()
        };
        {
            let ctx = self.store.context_mut(ctx_id)?;
            for (idx, d) in &pairs {
                if let Some(c) = ctx.chunks.get_mut(idx) {
                    c.density = *d;
                }
            }
        }
        if pairs.is_empty() || self.cfg.ratio_global >= 1.0 {
            return Ok(());
        }
        let densities: Vec<f64> = pairs.iter().map(|(_, d)| *d).collect();
        let plan = tolerance::solve_thresholds(&densities, &self.cfg.ratios, self.cfg.ratio_global)?;
        let assigned = plan.assignments(&densities);
        for ((idx, _), ratio) in pairs.iter().zip(assigned) {
            let target = (ratio * f64::from(base)).round() as u8;
            let key = ChunkKey { ctx_id, chunk_index: *idx };
            let current = self.store.chunk(key)?;
            if current.bitwidth <= target {
                continue;
            }
            let ChunkPayload::Quantized(q) = current.payload.as_ref().expect("in memory") else {
                continue;
            };
            let lower = crate::quant::requantize(q, target)?;
            self.store.replace_payload(key, ChunkPayload::Quantized(lower))?;
        }
        Ok(())
    }

    /// Restore any chunk that went missing mid-inference (the exception
    /// path; counted separately and zero in normal operation).
    fn fault_missing(&mut self, ctx_id: CtxId, kv: &mut KvTensor, now: u64) -> Result<usize> {
        let missing = self.store.context(ctx_id)?.missing_chunks();
        let mut count = 0usize;
        for idx in missing {
            let key = ChunkKey { ctx_id, chunk_index: idx };
            let bytes = self.store.chunk(key)?.payload_bytes;
            self.ensure_free(bytes)?;
            self.store.fault(key, &self.lm, now)?;
            let (span, values) = {
                let c = self.store.chunk(key)?;
                let payload = c.payload.as_ref().expect("fault restored the payload");
                (c.span(), self.store.payload_values(payload)?)
            };
            self.store.write_span(kv, span, &values);
            count += 1;
        }
        Ok(count)
    }

    fn claim_with_reclaim(
        &mut self,
        key: ChunkKey,
        token_start: usize,
        payload: ChunkPayload,
        now: u64,
    ) -> Result<()> {
        self.ensure_free(payload.payload_bytes())?;
        self.store.claim(key, token_start, payload, now)
    }

    fn replace_with_reclaim(&mut self, key: ChunkKey, payload: ChunkPayload) -> Result<()> {
        let new = payload.payload_bytes();
        let old = self.store.chunk(key)?.payload_bytes;
        if new > old {
            self.ensure_free(new - old)?;
        }
        self.store.replace_payload(key, payload)
    }
}
