//! Shared independent oracles and corpus generators for the integration
//! tests. Everything here stays deliberately naive: linear scans and
//! explicit filtering, no reuse of the mapping implementation.

use tilebatch::rng::SplitMix64;
use tilebatch::task::{GemmShape, StrategyCatalog, Task, TaskParams, TilingStrategy};

/// Catalog with a single 1x1 tile strategy: a task with m rows and one
/// column has exactly m tiles, so arbitrary tile-count sequences are easy
/// to stage.
pub fn unit_catalog() -> StrategyCatalog {
    StrategyCatalog::new(vec![TilingStrategy::new(1, 1, 1)], vec![]).unwrap()
}

/// Tasks whose tile counts are exactly `counts` under [`unit_catalog`].
pub fn tasks_with_counts(counts: &[u64]) -> Vec<Task> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            Task::new(
                i as u32 + 1,
                1,
                GemmShape::new(c, 1, 1),
                TaskParams::default(),
            )
        })
        .collect()
}

/// Linear scan over the logical prefix: first task whose inclusive prefix
/// exceeds the block index.
pub fn linear_scan_oracle(logical: &[u64], block: u64) -> (u32, u64) {
    let mut h = 0usize;
    while logical[h] <= block {
        h += 1;
    }
    let base = if h > 0 { logical[h - 1] } else { 0 };
    (h as u32, block - base)
}

/// Filter-then-scan oracle for batches with empty tasks: returns the real
/// (1-based) task index and the tile inside it.
pub fn nonempty_oracle(counts: &[u64], block: u64) -> (u32, u64) {
    let mut remaining = block;
    for (i, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        if remaining < count {
            return (i as u32 + 1, remaining);
        }
        remaining -= count;
    }
    panic!("block {block} beyond total tiles");
}

/// One randomized batch of the mapping corpus.
pub struct CorpusBatch {
    pub counts: Vec<u64>,
    pub warp_size: u32,
}

/// Randomized tile-count batches: N in [1, 256], counts in [0, 50] for
/// odd-indexed batches (zeros allowed) and [1, 50] for even-indexed ones,
/// warp sizes alternating over {8, 32}. Batches whose counts are all zero
/// are redrawn.
pub fn mapping_corpus(seed: u64, batches: usize) -> Vec<CorpusBatch> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(batches);
    while out.len() < batches {
        let with_zeros = out.len() % 2 == 1;
        let n = rng.next_below(256) as usize + 1;
        let counts: Vec<u64> = (0..n)
            .map(|_| {
                if with_zeros {
                    rng.next_below(51)
                } else {
                    rng.next_below(50) + 1
                }
            })
            .collect();
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        let warp_size = if out.len() % 4 < 2 { 8 } else { 32 };
        out.push(CorpusBatch { counts, warp_size });
    }
    out
}
