use super::*;
use crate::pipeline::CostModel;
use crate::tinylm::{NoSink, TinyLm, TinyLmConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small_lm(seed: u64) -> TinyLm {
    TinyLm::new(TinyLmConfig { layers: 2, heads: 4, head_dim: 16, max_seq: 512, seed })
}

fn small_store(budget: usize, dir: &TempDir) -> ChunkStore {
    ChunkStore::new(budget, dir.path(), 16, 2, 4, 16).unwrap()
}

/// Decode `tokens` into a fresh context, quantizing each chunk as it
/// completes and consuming the quantized view, the way the engine does.
fn build_ctx(store: &mut ChunkStore, lm: &TinyLm, ctx_id: u64, tokens: &[u8], bw: u8) -> KvTensor {
    store.create_context(ctx_id).unwrap();
    store.context_mut(ctx_id).unwrap().tokens = tokens.to_vec();
    let ct = store.chunk_tokens();
    let mut kv = lm.empty_cache(0);
    for (i, &t) in tokens.iter().enumerate() {
        lm.forward_step(&mut kv, t, &mut NoSink).unwrap();
        if (i + 1) % ct == 0 {
            let span = TokenSpan::new(i + 1 - ct, i + 1);
            let payload = store.payload_from_span(&kv, span, bw).unwrap();
            let vals = store.payload_values(&payload).unwrap();
            store.write_span(&mut kv, span, &vals);
            let key = ChunkKey { ctx_id, chunk_index: (i / ct) as u32 };
            store.claim(key, span.start, payload, 0).unwrap();
        }
    }
    kv
}

#[test]
fn claim_accounts_exact_payload_bytes() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(1);
    let tokens: Vec<u8> = (0..16).map(|i| i as u8 * 3).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    // 16 tokens x (2 layers * 2 * 4 heads * 16 dims) channels at 1 byte.
    assert_eq!(store.ledger().used(), 16 * 256);
    assert_eq!(store.ledger().metadata_overhead(), 256 * 8);
}

#[test]
fn claim_beyond_budget_fails_and_leaves_ledger_unchanged() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(100, &dir);
    store.create_context(9).unwrap();
    let payload = ChunkPayload::Quantized(
        crate::quant::quantize(&vec![1.0f32; 16 * 256], 16, 8).unwrap(),
    );
    let err = store.claim(ChunkKey { ctx_id: 9, chunk_index: 0 }, 0, payload, 0);
    assert!(matches!(err, Err(Error::BudgetExceeded { .. })));
    assert_eq!(store.ledger().used(), 0);
    assert_eq!(store.ledger().metadata_overhead(), 0);
}

#[test]
fn claim_after_reclaim_of_equal_size_succeeds() {
    let dir = TempDir::new().unwrap();
    // Budget fits exactly one full context of 2 chunks.
    let mut store = small_store(2 * 16 * 256, &dir);
    let lm = small_lm(2);
    let tokens: Vec<u8> = (0..32).map(|i| i as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    assert_eq!(store.ledger().free(), 0);

    let key0 = ChunkKey { ctx_id: 1, chunk_index: 0 };
    let report = store.reclaim(16 * 256, &[key0]).unwrap();
    assert_eq!(report.freed_bytes, 16 * 256);
    // The victim was dirty (never written), so reclaim wrote it out first.
    assert!(report.write_bytes > 0);

    let payload = ChunkPayload::Quantized(
        crate::quant::quantize(&vec![0.5f32; 16 * 256], 16, 8).unwrap(),
    );
    store.create_context(2).unwrap();
    store
        .claim(ChunkKey { ctx_id: 2, chunk_index: 0 }, 0, payload, 1)
        .unwrap();
    assert_eq!(store.ledger().free(), 0);
}

#[test]
fn reclaim_of_clean_chunks_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(3);
    let tokens: Vec<u8> = (0..48).map(|i| i as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    for i in 0..3 {
        store.write_chunk(ChunkKey { ctx_id: 1, chunk_index: i }).unwrap();
    }
    let free_before = store.ledger().free();
    let order: Vec<ChunkKey> =
        (0..3).map(|i| ChunkKey { ctx_id: 1, chunk_index: i }).collect();
    let report = store.reclaim(free_before + 1, &order).unwrap();
    assert_eq!(report.write_bytes, 0, "clean chunks evict with zero write I/O");
    assert_eq!(report.evicted.len(), 1, "one chunk satisfies one extra byte");
}

#[test]
fn reclaim_pops_the_minimal_prefix() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(4);
    let tokens: Vec<u8> = (0..64).map(|i| i as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    let order: Vec<ChunkKey> =
        (0..4).map(|i| ChunkKey { ctx_id: 1, chunk_index: i }).collect();
    let free = store.ledger().free();
    let report = store.reclaim(free + 16 * 256 + 1, &order).unwrap();
    assert_eq!(report.evicted.len(), 2);
}

#[test]
fn reclaim_without_enough_candidates_is_out_of_memory() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(16 * 256, &dir);
    let lm = small_lm(5);
    let tokens: Vec<u8> = (0..16).map(|i| i as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    let err = store.reclaim(1 << 20, &[ChunkKey { ctx_id: 1, chunk_index: 0 }]);
    assert!(matches!(err, Err(Error::OutOfMemory { .. })));
}

#[test]
fn used_never_exceeds_budget_across_random_operations() {
    let dir = TempDir::new().unwrap();
    let mut store = ChunkStore::new(5000, dir.path(), 4, 1, 1, 2).unwrap();
    store.create_context(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut next_index = 0u32;
    let mut live: Vec<ChunkKey> = Vec::new();
    for step in 0..10_000 {
        assert!(
            store.ledger().used() <= store.ledger().budget(),
            "budget violated at step {step}"
        );
        match rng.random_range(0..4) {
            0 => {
                let tokens = rng.random_range(1..=4usize);
                let values: Vec<f32> =
                    (0..tokens * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let payload =
                    ChunkPayload::Quantized(crate::quant::quantize(&values, tokens, 8).unwrap());
                let key = ChunkKey { ctx_id: 1, chunk_index: next_index };
                if store.claim(key, 0, payload, step).is_ok() {
                    live.push(key);
                    next_index += 1;
                }
            }
            1 => {
                if let Some(&key) = live.get(rng.random_range(0..live.len().max(1)).min(live.len().saturating_sub(1))) {
                    if store.chunk(key).map(|c| c.in_memory()).unwrap_or(false) {
                        store.write_chunk(key).unwrap();
                    }
                }
            }
            2 => {
                if !live.is_empty() {
                    let key = live[rng.random_range(0..live.len())];
                    store.evict_chunk(key).unwrap();
                }
            }
            _ => {
                let needed = rng.random_range(0..2000usize);
                let _ = store.reclaim(needed, &live.clone());
            }
        }
    }
}

#[test]
fn evicted_chunk_round_trips_bit_exactly_through_its_file() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(6);
    let tokens: Vec<u8> = (0..32).map(|i| (i * 5) as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    let key = ChunkKey { ctx_id: 1, chunk_index: 1 };
    let original = store.chunk(key).unwrap().payload.clone().unwrap();

    store.evict_chunk(key).unwrap();
    assert_eq!(store.chunk(key).unwrap().residency, Residency::OnDisk);
    assert!(store.chunk(key).unwrap().payload.is_none());

    let report = store.fault(key, &lm, 7).unwrap();
    assert!(!report.was_resident);
    assert!(!report.recomputed);
    assert_eq!(store.chunk(key).unwrap().payload.as_ref().unwrap(), &original);
}

#[test]
fn fault_on_resident_chunk_is_a_no_op() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(7);
    let tokens: Vec<u8> = (0..16).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    let used = store.ledger().used();
    let report = store.fault(ChunkKey { ctx_id: 1, chunk_index: 0 }, &lm, 3).unwrap();
    assert!(report.was_resident);
    assert_eq!(store.ledger().used(), used);
}

#[test]
fn fault_with_corrupt_file_recomputes_the_chunk() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(8);
    let tokens: Vec<u8> = (0..32).map(|i| (i * 11) as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    let key = ChunkKey { ctx_id: 1, chunk_index: 0 };
    let original = store.chunk(key).unwrap().payload.clone().unwrap();
    store.evict_chunk(key).unwrap();
    std::fs::write(store.swap_path(key), b"garbage").unwrap();

    let report = store.fault(key, &lm, 9).unwrap();
    assert!(report.recomputed);
    // At ratio 1 the regenerated payload reproduces the stored codes.
    assert_eq!(store.chunk(key).unwrap().payload.as_ref().unwrap(), &original);
    assert!(store.chunk(key).unwrap().dirty);
}

#[test]
fn pure_io_load_reads_exactly_the_payload_bytes() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(9);
    let tokens: Vec<u8> = (0..64).map(|i| (i * 7) as u8).collect();
    let kv_before = build_ctx(&mut store, &lm, 1, &tokens, 8);
    let mut expected_bytes = 0u64;
    for i in 0..4 {
        let key = ChunkKey { ctx_id: 1, chunk_index: i };
        store.write_chunk(key).unwrap();
        store.evict_chunk(key).unwrap();
        expected_bytes += store.chunk(key).unwrap().payload_bytes as u64;
    }
    let (kv, report) = store
        .load(1, &lm, &CostModel::default_calibrated(), false, 10)
        .unwrap();
    assert_eq!(report.read_chunks, 4);
    assert_eq!(report.recomputed_chunks, 0);
    assert_eq!(report.bytes_read, expected_bytes);
    assert_eq!(kv_before.max_abs_diff(&kv), 0.0, "reloaded rows are bit-equal");
    assert!(store.context(1).unwrap().missing_chunks().is_empty());
}

#[test]
fn recompute_lane_reproduces_stored_payloads_at_ratio_one() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(10);
    let tokens: Vec<u8> = {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        (0..64).map(|_| rng.random()).collect()
    };
    let kv_before = build_ctx(&mut store, &lm, 1, &tokens, 8);
    let mut originals = Vec::new();
    for i in 0..4 {
        let key = ChunkKey { ctx_id: 1, chunk_index: i };
        store.write_chunk(key).unwrap();
        originals.push(store.chunk(key).unwrap().payload.clone().unwrap());
        store.evict_chunk(key).unwrap();
    }
    // A prohibitively slow disk pushes every chunk onto the recompute lane.
    let cost = CostModel::synthetic(1e-6, 1e3);
    let (kv, report) = store.load(1, &lm, &cost, true, 11).unwrap();
    assert_eq!(report.recomputed_chunks, 4);
    assert_eq!(report.read_chunks, 0);
    for (i, original) in originals.iter().enumerate() {
        let key = ChunkKey { ctx_id: 1, chunk_index: i as u32 };
        assert_eq!(
            store.chunk(key).unwrap().payload.as_ref().unwrap(),
            original,
            "recomputed chunk {i} diverged from its stored payload"
        );
    }
    assert_eq!(kv_before.max_abs_diff(&kv), 0.0);
}

#[test]
fn mixed_load_at_full_precision_matches_the_uncompressed_run() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 22, &dir);
    let lm = small_lm(11);
    let tokens: Vec<u8> = {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        (0..64).map(|_| rng.random()).collect()
    };
    let kv_before = build_ctx(&mut store, &lm, 1, &tokens, swapfile::BITWIDTH_FULL);
    for i in 0..4 {
        let key = ChunkKey { ctx_id: 1, chunk_index: i };
        store.write_chunk(key).unwrap();
        store.evict_chunk(key).unwrap();
    }
    // Balanced costs: the plan mixes both lanes.
    let cost = CostModel::synthetic(1e-5, 2e-9);
    let (kv, report) = store.load(1, &lm, &cost, true, 12).unwrap();
    assert_eq!(report.restored_chunks, 4);
    assert!(kv_before.max_abs_diff(&kv) <= 1e-4);
}

#[test]
fn missing_swap_file_falls_back_to_recompute_during_load() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(12);
    let tokens: Vec<u8> = (0..48).map(|i| (i * 13) as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    let mut originals = Vec::new();
    for i in 0..3 {
        let key = ChunkKey { ctx_id: 1, chunk_index: i };
        store.write_chunk(key).unwrap();
        originals.push(store.chunk(key).unwrap().payload.clone().unwrap());
        store.evict_chunk(key).unwrap();
    }
    std::fs::remove_file(store.swap_path(ChunkKey { ctx_id: 1, chunk_index: 1 })).unwrap();

    let (_, report) = store
        .load(1, &lm, &CostModel::default_calibrated(), false, 13)
        .unwrap();
    assert_eq!(report.io_fallbacks, 1);
    for (i, original) in originals.iter().enumerate() {
        let key = ChunkKey { ctx_id: 1, chunk_index: i as u32 };
        assert_eq!(store.chunk(key).unwrap().payload.as_ref().unwrap(), original);
    }
}

#[test]
fn sliding_window_drops_exactly_the_oldest_chunk() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(13);
    // 80 tokens against a 64-token window: exactly one 16-token chunk goes.
    let tokens: Vec<u8> = (0..80).map(|i| i as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    let used_before = store.ledger().used();
    let dropped = store.slide_window(1, 64).unwrap();
    assert_eq!(dropped, vec![0]);
    let ctx = store.context(1).unwrap();
    assert_eq!(ctx.window_start, 16);
    assert_eq!(ctx.resident_tokens(), 64);
    assert_eq!(store.ledger().used(), used_before - 16 * 256);
    assert!(!store.swap_path(ChunkKey { ctx_id: 1, chunk_index: 0 }).exists());
}

#[test]
fn full_recompute_after_window_slide_matches_the_windowed_oracle() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 22, &dir);
    let lm = small_lm(14);
    let tokens: Vec<u8> = (0..80).map(|i| (i * 3) as u8).collect();
    build_ctx(&mut store, &lm, 1, &tokens, swapfile::BITWIDTH_FULL);
    store.slide_window(1, 64).unwrap();

    // Lose every surviving chunk and its file: the load path must rebuild
    // the whole suffix from text alone, at the original global positions.
    for i in 1..5u32 {
        let key = ChunkKey { ctx_id: 1, chunk_index: i };
        store.write_chunk(key).unwrap();
        store.evict_chunk(key).unwrap();
        std::fs::remove_file(store.swap_path(key)).unwrap();
    }
    let (kv, report) = store
        .load(1, &lm, &CostModel::default_calibrated(), true, 21)
        .unwrap();
    assert_eq!(report.recomputed_chunks, 4);
    assert_eq!(report.read_chunks, 0);

    let oracle = lm.forward_from(&tokens[16..], 16).unwrap();
    assert!(oracle.kv.max_abs_diff(&kv) <= 1e-4);
}

#[test]
fn delete_context_releases_memory_and_files() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(15);
    let tokens: Vec<u8> = (0..32).collect();
    build_ctx(&mut store, &lm, 1, &tokens, 8);
    store.write_chunk(ChunkKey { ctx_id: 1, chunk_index: 0 }).unwrap();
    assert!(store.delete_context(1).unwrap());
    assert_eq!(store.ledger().used(), 0);
    assert!(!dir.path().join("1").exists());
    assert!(!store.delete_context(1).unwrap(), "second delete reports absence");
}

#[test]
fn replace_payload_moves_the_ledger_by_the_delta() {
    let dir = TempDir::new().unwrap();
    let mut store = small_store(1 << 20, &dir);
    let lm = small_lm(16);
    let tokens: Vec<u8> = (0..16).collect();
    let kv = build_ctx(&mut store, &lm, 1, &tokens, 8);
    let key = ChunkKey { ctx_id: 1, chunk_index: 0 };
    let before = store.ledger().used();
    let smaller = store
        .payload_from_span(&kv, TokenSpan::new(0, 16), 2)
        .unwrap();
    store.replace_payload(key, smaller).unwrap();
    assert_eq!(store.ledger().used(), before - 16 * 256 + 16 * 256 / 4);
    assert_eq!(store.chunk(key).unwrap().bitwidth, 2);
    assert!(store.chunk(key).unwrap().dirty);
}
