//! Crate-wide error type.

use crate::chunkstore::ChunkKey;

/// Errors produced by the context memory manager and its collaborators.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input sequence does not fit in the model's maximum resident length.
    #[error("sequence length {len} exceeds maximum resident length {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// KV cache is full; the caller must slide the window before stepping.
    #[error("resident window is full ({len} tokens); slide the window first")]
    WindowFull { len: usize },

    /// A recompute span overlaps resident positions or another span.
    #[error("inconsistent recompute request: {0}")]
    SpanConflict(String),

    /// Non-finite values reached the quantizer.
    #[error("non-finite value in quantizer input")]
    NonFiniteInput,

    /// A serialized payload or swap file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid argument to an operation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested global compression ratio cannot be met with the
    /// configured ratio levels.
    #[error("global ratio {requested} unattainable; attainable interval is [{min}, {max}]")]
    InfeasibleRatio { requested: f64, min: f64, max: f64 },

    /// Claim would exceed the memory budget; reclaim first.
    #[error("claim of {requested} bytes exceeds free budget ({free} bytes free)")]
    BudgetExceeded { requested: usize, free: usize },

    /// No unlocked chunks remain to satisfy a reclaim.
    #[error("out of memory: {needed} bytes needed, only {available} unlocked bytes evictable")]
    OutOfMemory { needed: usize, available: usize },

    /// The context's working set cannot fit in the budget at all.
    #[error("busy: working set of {working_set} bytes cannot fit in budget of {budget} bytes")]
    Busy { working_set: usize, budget: usize },

    /// Unknown context handle.
    #[error("context {0} not found")]
    ContextNotFound(u64),

    /// Per-client active-context quota exceeded.
    #[error("context quota exceeded: at most {0} active contexts per client")]
    QuotaExceeded(usize),

    /// A chunk is unrecoverable: both its swap file and source text are gone.
    #[error("context {ctx_id} unrecoverable: chunk {chunk_index} lost on disk and not recomputable", ctx_id = key.ctx_id, chunk_index = key.chunk_index)]
    ChunkLost { key: ChunkKey },

    /// Cost-model profiling failed (degenerate test points).
    #[error("profiling error: {0}")]
    Profile(String),

    /// Density ledger update does not match the resident sequence.
    #[error("density ledger inconsistency: {0}")]
    LedgerMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
