//! Chunk-wise context memory management for stateful LLM serving.
//!
//! An LLM service that persists conversation state across calls keeps one
//! KV cache per context, and those caches quickly dominate memory. This
//! crate manages that memory at the granularity of fixed-span token
//! *chunks* that can be quantized to mixed bitwidths, swapped to disk, and
//! restored either by reading them back or by recomputing them from the
//! resident text — whichever the cost model says is faster.
//!
//! The crate is organized around the lifecycle of a chunk:
//!
//! - [`tinylm`] — a small deterministic decoder-only transformer with an
//!   explicit KV cache; the ground-truth engine for attention scores and
//!   for exact recompute of evicted chunks.
//! - [`quant`] — channel-wise linear quantization of chunks to 8/4/2 bits
//!   with bit-packed payloads.
//! - [`tolerance`] — attention-derived information density per chunk and
//!   the rank-threshold assignment that picks each chunk's ratio under a
//!   global compression target.
//! - [`chunkstore`] — chunk tables, the memory ledger, the swap-file
//!   format, and the Claim/Reclaim/Load/Fault primitives.
//! - [`pipeline`] — linear cost models for recompute and I/O, the elastic
//!   recompute-vs-I/O split, and the per-layer overlapped executor.
//! - [`lifecycle`] — eviction ordering (heaviest compression class first,
//!   least-recently-used within a class), ahead-of-time swap-out, and the
//!   working-set lock.
//! - [`engine`] — ties the above into a live serving engine with the
//!   new/call/delete context API.
//! - [`tracegen`] — synthetic context-switching traces and a trace-driven
//!   simulator comparing eviction/compression policies.
//! - [`service`] — a local socket service exposing the engine over
//!   newline-delimited JSON.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `llms` binary for the command-line entry points.

pub mod chunkstore;
pub mod engine;
pub mod error;
pub mod lifecycle;
pub mod pipeline;
pub mod quant;
pub mod service;
pub mod tinylm;
pub mod tolerance;
pub mod tracegen;

pub use error::{Error, Result};
