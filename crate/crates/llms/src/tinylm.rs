//! A small deterministic decoder-only transformer with an explicit KV cache.
//!
//! This is the ground-truth engine for the memory manager: it produces the
//! attention scores that drive compression-tolerance estimates, and it can
//! recompute the K/V of any subset of evicted token spans from their text,
//! even when the missing spans are interleaved with resident ones.
//!
//! Positions are absolute global token indices and are never renumbered,
//! so a token recomputed after its neighbors were dropped by the sliding
//! window still rotates its Q/K exactly as it did originally. Weights are
//! drawn from a seeded generator: the same seed yields bit-identical
//! weights, and full-sequence forward, token-by-token decode, and
//! interleaved recompute all route through one token-advance routine, so
//! they agree bit-for-bit on the values they produce.
//!
//! The vocabulary is byte-level (256 ids): any text tokenizes trivially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Token id in the byte-level vocabulary.
pub type TokenId = u8;

/// Byte-level vocabulary size.
pub const VOCAB: usize = 256;

/// Rotary position base frequency.
const ROPE_BASE: f32 = 10_000.0;

/// Half-open span of global token positions `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.end
    }
}

/// Model shape and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyLmConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Maximum resident sequence length (the KV window capacity).
    pub max_seq: usize,
    pub seed: u64,
}

impl TinyLmConfig {
    /// Hidden width: heads * head_dim.
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Channel count of one token's K+V across all layers.
    pub fn kv_channels(&self) -> usize {
        self.layers * 2 * self.hidden()
    }

    /// A 2-layer, 4-head, 16-dim configuration used throughout the tests.
    pub fn small(seed: u64) -> Self {
        Self { layers: 2, heads: 4, head_dim: 16, max_seq: 4096, seed }
    }
}

/// Per-layer K/V rows, each `len * heads * head_dim`, row-major by token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// KV cache for one context: per-layer K and V for the resident tokens.
///
/// Row `i` holds the token at global position `start + i`. The start
/// offset advances when the sliding window drops old rows; surviving rows
/// keep their global positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensor {
    start: usize,
    len: usize,
    heads: usize,
    head_dim: usize,
    layers: Vec<LayerKv>,
}

impl KvTensor {
    pub fn new(layers: usize, heads: usize, head_dim: usize, start: usize) -> Self {
        Self {
            start,
            len: 0,
            heads,
            head_dim,
            layers: (0..layers).map(|_| LayerKv { k: Vec::new(), v: Vec::new() }).collect(),
        }
    }

    /// Number of resident rows.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Global position of row 0.
    pub fn start(&self) -> usize {
        self.start
    }

    /// Global position one past the last resident row.
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn stride(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// K row of the token at relative index `rel`.
    pub fn k_row(&self, layer: usize, rel: usize) -> &[f32] {
        let s = self.stride();
        &self.layers[layer].k[rel * s..(rel + 1) * s]
    }

    /// V row of the token at relative index `rel`.
    pub fn v_row(&self, layer: usize, rel: usize) -> &[f32] {
        let s = self.stride();
        &self.layers[layer].v[rel * s..(rel + 1) * s]
    }

    /// Mutable K row of the token at relative index `rel`.
    pub fn k_row_mut(&mut self, layer: usize, rel: usize) -> &mut [f32] {
        let s = self.stride();
        &mut self.layers[layer].k[rel * s..(rel + 1) * s]
    }

    /// Mutable V row of the token at relative index `rel`.
    pub fn v_row_mut(&mut self, layer: usize, rel: usize) -> &mut [f32] {
        let s = self.stride();
        &mut self.layers[layer].v[rel * s..(rel + 1) * s]
    }

    /// Overwrite one token's K/V in one layer.
    pub fn set_row(&mut self, layer: usize, rel: usize, k: &[f32], v: &[f32]) {
        let s = self.stride();
        self.layers[layer].k[rel * s..(rel + 1) * s].copy_from_slice(k);
        self.layers[layer].v[rel * s..(rel + 1) * s].copy_from_slice(v);
    }

    /// Grow by `rows` zero-filled rows (to be overwritten by the model).
    pub fn grow(&mut self, rows: usize) {
        let s = self.stride();
        for layer in &mut self.layers {
            layer.k.resize((self.len + rows) * s, 0.0);
            layer.v.resize((self.len + rows) * s, 0.0);
        }
        self.len += rows;
    }

    /// Drop the oldest `rows` rows; survivors keep their global positions.
    pub fn drop_front(&mut self, rows: usize) {
        assert!(rows <= self.len);
        let s = self.stride();
        for layer in &mut self.layers {
            layer.k.drain(..rows * s);
            layer.v.drain(..rows * s);
        }
        self.start += rows;
        self.len -= rows;
    }

    /// Zero out a span of rows (test helper that simulates eviction).
    pub fn clear_span(&mut self, span: TokenSpan) {
        let s = self.stride();
        let a = span.start - self.start;
        let b = span.end - self.start;
        for layer in &mut self.layers {
            layer.k[a * s..b * s].fill(0.0);
            layer.v[a * s..b * s].fill(0.0);
        }
    }

    /// Max absolute difference across all K/V entries of two equal-shape tensors.
    pub fn max_abs_diff(&self, other: &KvTensor) -> f32 {
        let mut worst = 0.0f32;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.k.iter().zip(&b.k).chain(a.v.iter().zip(&b.v)) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

/// Receives attention rows as they are produced.
///
/// `row` holds the scores the token at relative index `rel_row` pays to
/// relative columns `0..=rel_row`; one call per (layer, head, new token).
pub trait AttentionSink {
    fn record(&mut self, layer: usize, head: usize, rel_row: usize, row: &[f32]);
}

/// Sink that discards rows (recompute restores state, it is not new inference).
pub struct NoSink;

impl AttentionSink for NoSink {
    fn record(&mut self, _: usize, _: usize, _: usize, _: &[f32]) {}
}

/// Dense lower-triangular attention matrices, one per (layer, head).
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    pub layers: usize,
    pub heads: usize,
    pub rows: usize,
    data: Vec<f32>,
}

impl AttentionMatrix {
    pub fn new(layers: usize, heads: usize, rows: usize) -> Self {
        Self { layers, heads, rows, data: vec![0.0; layers * heads * rows * rows] }
    }

    pub fn get(&self, layer: usize, head: usize, row: usize, col: usize) -> f32 {
        self.data[((layer * self.heads + head) * self.rows + row) * self.rows + col]
    }

    /// One column restricted to its defined (row >= col) entries.
    pub fn column(&self, layer: usize, head: usize, col: usize) -> Vec<f32> {
        (col..self.rows).map(|r| self.get(layer, head, r, col)).collect()
    }
}

impl AttentionSink for AttentionMatrix {
    fn record(&mut self, layer: usize, head: usize, rel_row: usize, row: &[f32]) {
        let base = ((layer * self.heads + head) * self.rows + rel_row) * self.rows;
        self.data[base..base + row.len()].copy_from_slice(row);
    }
}

/// Output of a full forward pass.
pub struct ForwardOutput {
    pub kv: KvTensor,
    pub attention: AttentionMatrix,
    /// Next-token logits after the last input token.
    pub logits: Vec<f32>,
}

struct LayerWeights {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

/// The model: seeded random weights, explicit attention, rotary positions.
pub struct TinyLm {
    cfg: TinyLmConfig,
    embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    unembed: Vec<f32>,
}

fn fill_normal(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// Row-major matrix-vector product: `w` is `rows x cols`.
fn mat_vec(w: &[f32], x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out.push(acc);
    }
    out
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotate pairs within each head by the absolute position angle.
fn apply_rope(vec: &mut [f32], heads: usize, head_dim: usize, pos: usize) {
    let half = head_dim / 2;
    for h in 0..heads {
        let base = h * head_dim;
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f32 / head_dim as f32);
            let angle = pos as f32 * freq;
            let (sin, cos) = angle.sin_cos();
            let a = vec[base + 2 * i];
            let b = vec[base + 2 * i + 1];
            vec[base + 2 * i] = a * cos - b * sin;
            vec[base + 2 * i + 1] = a * sin + b * cos;
        }
    }
}

impl TinyLm {
    /// Build the model; all weights derive deterministically from the seed.
    pub fn new(cfg: TinyLmConfig) -> Self {
        assert!(cfg.layers >= 1, "at least one layer");
        assert!(cfg.heads >= 1, "at least one head");
        assert!(cfg.head_dim >= 2 && cfg.head_dim % 2 == 0, "even head_dim");
        let hidden = cfg.hidden();
        let ff = hidden * 4;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std_h = 1.0 / (hidden as f32).sqrt();
        let std_ff = 1.0 / (ff as f32).sqrt();
        let embed = fill_normal(&mut rng, VOCAB * hidden, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: fill_normal(&mut rng, hidden * hidden, std_h),
                wk: fill_normal(&mut rng, hidden * hidden, std_h),
                wv: fill_normal(&mut rng, hidden * hidden, std_h),
                wo: fill_normal(&mut rng, hidden * hidden, std_h),
                w_up: fill_normal(&mut rng, ff * hidden, std_h),
                w_down: fill_normal(&mut rng, hidden * ff, std_ff),
            })
            .collect();
        let unembed = fill_normal(&mut rng, VOCAB * hidden, std_h);
        Self { cfg, embed, layers, unembed }
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.cfg
    }

    /// Fresh empty cache positioned at global index `start`.
    pub fn empty_cache(&self, start: usize) -> KvTensor {
        KvTensor::new(self.cfg.layers, self.cfg.heads, self.cfg.head_dim, start)
    }

    fn embed_token(&self, id: TokenId) -> Vec<f32> {
        let hidden = self.cfg.hidden();
        self.embed[id as usize * hidden..(id as usize + 1) * hidden].to_vec()
    }

    /// Start advancing a batch of tokens through the layers.
    ///
    /// `rels` are ascending relative row indices into the cache the batch
    /// will be stepped against; rows for those indices must already exist.
    pub fn begin_batch(&self, rels: Vec<usize>, ids: Vec<TokenId>) -> Result<TokenBatch<'_>> {
        if rels.is_empty() || rels.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "batch of {} positions with {} token ids",
                rels.len(),
                ids.len()
            )));
        }
        if rels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "batch positions must be strictly ascending".to_string(),
            ));
        }
        let states = ids.iter().map(|&id| self.embed_token(id)).collect();
        Ok(TokenBatch { lm: self, rels, states, next_layer: 0 })
    }

    /// Advance a set of tokens through every layer, writing their K/V into
    /// `kv` and returning the last token's logits. One routine backs full
    /// forward, single-token decode, and interleaved recompute, so all
    /// three agree bit-for-bit.
    fn run_tokens(
        &self,
        kv: &mut KvTensor,
        rels: &[usize],
        ids: &[TokenId],
        sink: &mut dyn AttentionSink,
    ) -> Result<Vec<f32>> {
        let mut batch = self.begin_batch(rels.to_vec(), ids.to_vec())?;
        for _ in 0..self.cfg.layers {
            batch.step_layer(kv, sink)?;
        }
        batch.finish()
    }

    /// Append `tokens` to the cache, recording attention rows into `sink`.
    /// Returns the logits after the final appended token.
    pub fn prefill(
        &self,
        kv: &mut KvTensor,
        tokens: &[TokenId],
        sink: &mut dyn AttentionSink,
    ) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token batch".to_string()));
        }
        if kv.len() + tokens.len() > self.cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: kv.len() + tokens.len(),
                max: self.cfg.max_seq,
            });
        }
        let first = kv.len();
        kv.grow(tokens.len());
        let rels: Vec<usize> = (first..first + tokens.len()).collect();
        self.run_tokens(kv, &rels, tokens, sink)
    }

    /// Decode one token against the cache.
    pub fn forward_step(
        &self,
        kv: &mut KvTensor,
        token: TokenId,
        sink: &mut dyn AttentionSink,
    ) -> Result<Vec<f32>> {
        if kv.len() >= self.cfg.max_seq {
            return Err(Error::WindowFull { len: kv.len() });
        }
        self.prefill(kv, &[token], sink)
    }

    /// Full forward over a token sequence starting at global position 0.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<ForwardOutput> {
        self.forward_from(tokens, 0)
    }

    /// Full forward with the first token at global position `start`
    /// (the oracle for windowed contexts).
    pub fn forward_from(&self, tokens: &[TokenId], start: usize) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".to_string()));
        }
        let mut kv = self.empty_cache(start);
        let mut attention = AttentionMatrix::new(self.cfg.layers, self.cfg.heads, tokens.len());
        let logits = self.prefill(&mut kv, tokens, &mut attention)?;
        Ok(ForwardOutput { kv, attention, logits })
    }

    /// Recompute the K/V of missing token spans in place of a partial cache.
    ///
    /// `token_ids[i]` is the token at global position `resident.start() + i`.
    /// Missing tokens keep their original global positions and attend to
    /// exactly the positions at or before their own; resident rows pass
    /// through unmodified.
    pub fn recompute_chunks(
        &self,
        resident: &KvTensor,
        missing: &[TokenSpan],
        token_ids: &[TokenId],
    ) -> Result<KvTensor> {
        if token_ids.len() != resident.len() {
            return Err(Error::SpanConflict(format!(
                "{} token ids for {} resident rows",
                token_ids.len(),
                resident.len()
            )));
        }
        let mut spans: Vec<TokenSpan> = missing.iter().copied().filter(|s| !s.is_empty()).collect();
        spans.sort_by_key(|s| s.start);
        for pair in spans.windows(2) {
            if pair[0].end > pair[1].start {
                return Err(Error::SpanConflict(format!(
                    "spans [{}, {}) and [{}, {}) overlap",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                )));
            }
        }
        if let (Some(first), Some(last)) = (spans.first(), spans.last()) {
            if first.start < resident.start() || last.end > resident.end() {
                return Err(Error::SpanConflict(format!(
                    "spans outside resident range [{}, {})",
                    resident.start(),
                    resident.end()
                )));
            }
        }

        let mut out = resident.clone();
        if spans.is_empty() {
            return Ok(out);
        }
        let mut rels = Vec::new();
        let mut ids = Vec::new();
        for span in &spans {
            for pos in span.start..span.end {
                let rel = pos - resident.start();
                rels.push(rel);
                ids.push(token_ids[rel]);
            }
        }
        self.run_tokens(&mut out, &rels, &ids, &mut NoSink)?;
        Ok(out)
    }
}

/// A batch of tokens advancing through the model one layer at a time.
///
/// The layer-stepped form exists so a loader can interleave disk reads
/// with recompute: layer `l` can only be stepped once every K/V row below
/// the batch's positions is valid *for that layer*, which is exactly when
/// that layer's reads have landed.
pub struct TokenBatch<'lm> {
    lm: &'lm TinyLm,
    rels: Vec<usize>,
    states: Vec<Vec<f32>>,
    next_layer: usize,
}

impl TokenBatch<'_> {
    /// Relative row indices the batch writes.
    pub fn rels(&self) -> &[usize] {
        &self.rels
    }

    /// Layers already stepped.
    pub fn layers_done(&self) -> usize {
        self.next_layer
    }

    /// Run the next layer: compute each batch token's K/V for this layer,
    /// write it into `kv`, and advance the token's hidden state. Tokens
    /// are processed in ascending position order so that earlier batch
    /// tokens' rows are in place when later ones attend to them.
    pub fn step_layer(&mut self, kv: &mut KvTensor, sink: &mut dyn AttentionSink) -> Result<()> {
        let cfg = self.lm.config();
        if self.next_layer >= cfg.layers {
            return Err(Error::InvalidArgument("all layers already stepped".to_string()));
        }
        let l = self.next_layer;
        let lw = &self.lm.layers[l];
        let hidden = cfg.hidden();
        let heads = cfg.heads;
        let hd = cfg.head_dim;
        let ff = hidden * 4;
        let inv_sqrt_d = 1.0 / (hd as f32).sqrt();

        for (ti, &rel) in self.rels.iter().enumerate() {
            let pos = kv.start() + rel;
            let normed = rms_norm(&self.states[ti]);
            let mut q = mat_vec(&lw.wq, &normed, hidden, hidden);
            let mut k = mat_vec(&lw.wk, &normed, hidden, hidden);
            let v = mat_vec(&lw.wv, &normed, hidden, hidden);
            apply_rope(&mut q, heads, hd, pos);
            apply_rope(&mut k, heads, hd, pos);
            kv.set_row(l, rel, &k, &v);

            let mut attn_out = vec![0.0f32; hidden];
            let mut row = vec![0.0f32; rel + 1];
            for h in 0..heads {
                let qh = &q[h * hd..(h + 1) * hd];
                // Causal scores over resident columns 0..=rel.
                for (c, slot) in row.iter_mut().enumerate() {
                    let kh = &kv.k_row(l, c)[h * hd..(h + 1) * hd];
                    let mut dot = 0.0f32;
                    for (a, b) in qh.iter().zip(kh) {
                        dot += a * b;
                    }
                    *slot = dot * inv_sqrt_d;
                }
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for s in row.iter_mut() {
                    *s /= denom;
                }
                sink.record(l, h, rel, &row);
                for (c, &a) in row.iter().enumerate() {
                    let vh = &kv.v_row(l, c)[h * hd..(h + 1) * hd];
                    for (o, &vv) in attn_out[h * hd..(h + 1) * hd].iter_mut().zip(vh) {
                        *o += a * vv;
                    }
                }
            }

            let proj = mat_vec(&lw.wo, &attn_out, hidden, hidden);
            for (s, p) in self.states[ti].iter_mut().zip(&proj) {
                *s += p;
            }
            let normed2 = rms_norm(&self.states[ti]);
            let mut up = mat_vec(&lw.w_up, &normed2, ff, hidden);
            for u in up.iter_mut() {
                *u = silu(*u);
            }
            let down = mat_vec(&lw.w_down, &up, hidden, ff);
            for (s, d) in self.states[ti].iter_mut().zip(&down) {
                *s += d;
            }
        }
        self.next_layer += 1;
        Ok(())
    }

    /// Logits after the batch's final token; every layer must be stepped.
    pub fn finish(self) -> Result<Vec<f32>> {
        if self.next_layer != self.lm.config().layers {
            return Err(Error::InvalidArgument(format!(
                "finish after {} of {} layers",
                self.next_layer,
                self.lm.config().layers
            )));
        }
        let hidden = self.lm.config().hidden();
        let last = rms_norm(self.states.last().expect("non-empty batch"));
        Ok(mat_vec(&self.lm.unembed, &last, VOCAB, hidden))
    }
}
