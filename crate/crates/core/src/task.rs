//! Batch, task, and tiling-strategy types shared by the planning and
//! execution modules.
//!
//! A batch holds `N` tasks. Each task is a unit of work (for MoE, one
//! expert's GEMM) tagged with a tiling strategy that fixes how its output
//! is partitioned into tiles; every tile is later assigned to exactly one
//! thread block. Tiles are enumerated row-major over the `(m, n)` output
//! lattice, and the reduction depth `k` is never split across blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StrategyId = u32;

/// One pre-defined tiling: `tile_m` output rows by `tile_n` output columns
/// per thread block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingStrategy {
    pub id: StrategyId,
    pub tile_m: u64,
    pub tile_n: u64,
}

impl TilingStrategy {
    pub fn new(id: StrategyId, tile_m: u64, tile_n: u64) -> Self {
        Self { id, tile_m, tile_n }
    }
}

/// Catalog of the `K` tiling strategies available to a batch, plus the
/// row-count thresholds used to pick a strategy for a planned task.
///
/// Strategy ids must be unique and contiguous from 1 to `K`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyCatalog {
    strategies: Vec<TilingStrategy>,
    /// `(max_rows, id)` pairs, ascending by `max_rows`; the first entry
    /// whose bound covers `m` wins. The last entry must be unbounded.
    selection: Vec<(u64, StrategyId)>,
}

impl StrategyCatalog {
    pub fn new(strategies: Vec<TilingStrategy>, selection: Vec<(u64, StrategyId)>) -> Result<Self> {
        if strategies.is_empty() {
            return Err(Error::InvalidCatalog("no strategies".into()));
        }
        let mut ids: Vec<StrategyId> = strategies.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        for (i, id) in ids.iter().enumerate() {
            if *id != i as StrategyId + 1 {
                return Err(Error::InvalidCatalog(format!(
                    "strategy ids must be contiguous from 1; found {ids:?}"
                )));
            }
        }
        for s in &strategies {
            if s.tile_m == 0 || s.tile_n == 0 {
                return Err(Error::InvalidCatalog(format!(
                    "strategy {} has zero tile extent",
                    s.id
                )));
            }
        }
        if !selection.is_empty() {
            if selection.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::InvalidCatalog(
                    "selection thresholds must be strictly ascending".into(),
                ));
            }
            if selection.last().unwrap().0 != u64::MAX {
                return Err(Error::InvalidCatalog(
                    "selection table must end with an unbounded entry".into(),
                ));
            }
            for (_, id) in &selection {
                if !strategies.iter().any(|s| s.id == *id) {
                    return Err(Error::UnknownStrategy { id: *id });
                }
            }
        }
        Ok(Self {
            strategies,
            selection,
        })
    }

    /// Default MoE catalog: a small 16x64 tile for lightly loaded experts
    /// (m <= 64) and a large 128x128 tile otherwise.
    pub fn moe_default() -> Self {
        Self::new(
            vec![
                TilingStrategy::new(1, 16, 64),
                TilingStrategy::new(2, 128, 128),
            ],
            vec![(64, 1), (u64::MAX, 2)],
        )
        .expect("default catalog is valid")
    }

    pub fn get(&self, id: StrategyId) -> Result<&TilingStrategy> {
        self.strategies
            .iter()
            .find(|s| s.id == id)
            .ok_or(Error::UnknownStrategy { id })
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn strategies(&self) -> &[TilingStrategy] {
        &self.strategies
    }

    pub fn has_selection(&self) -> bool {
        !self.selection.is_empty()
    }

    /// Strategy for a task with `m` output rows, per the threshold table.
    pub fn select_for_rows(&self, m: u64) -> Result<StrategyId> {
        self.selection
            .iter()
            .find(|(max_rows, _)| m <= *max_rows)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::InvalidCatalog("catalog has no selection table".into()))
    }
}

/// Output shape of one task's GEMM: `m` rows (tokens routed to the expert),
/// `n` columns, reduction depth `k`. `m = 0` denotes an empty task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

impl GemmShape {
    pub fn new(m: u64, n: u64, k: u64) -> Self {
        Self { m, n, k }
    }
}

/// Handles wiring a task to its buffers: the expert weight matrix, the
/// expert's token index bucket, and the output region. All three are
/// indices into the executor's buffer tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub weight_ref: usize,
    pub bucket_ref: usize,
    pub output_ref: usize,
}

impl TaskParams {
    /// All three handles point at the same expert slot.
    pub fn for_expert(slot: usize) -> Self {
        Self {
            weight_ref: slot,
            bucket_ref: slot,
            output_ref: slot,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    /// 1-based position in the batch.
    pub index: u32,
    /// Task type tag; selects the task function and the tiling strategy.
    pub kind: StrategyId,
    pub shape: GemmShape,
    pub params: TaskParams,
}

impl Task {
    pub fn new(index: u32, kind: StrategyId, shape: GemmShape, params: TaskParams) -> Self {
        Self {
            index,
            kind,
            shape,
            params,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.shape.m == 0
    }

    /// Number of tiles this task requires:
    /// `ceil(m / tile_m) * ceil(n / tile_n)`; zero iff the task is empty.
    pub fn tile_count(&self, catalog: &StrategyCatalog) -> Result<u64> {
        let strategy = catalog.get(self.kind)?;
        let row_tiles = self.shape.m.div_ceil(strategy.tile_m);
        let col_tiles = self.shape.n.div_ceil(strategy.tile_n);
        row_tiles.checked_mul(col_tiles).ok_or(Error::Capacity)
    }
}

pub const DEFAULT_WARP_SIZE: u32 = 32;
pub const MAX_WARP_SIZE: u32 = 64;

pub(crate) fn validate_warp_size(warp_size: u32) -> Result<()> {
    if warp_size == 0 || warp_size > MAX_WARP_SIZE || !warp_size.is_power_of_two() {
        return Err(Error::InvalidWarpSize(warp_size));
    }
    Ok(())
}

/// An ordered sequence of tasks plus the warp size used when building and
/// decompressing its tile mapping. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Batch {
    tasks: Vec<Task>,
    warp_size: u32,
}

impl Batch {
    pub fn new(tasks: Vec<Task>, warp_size: u32) -> Result<Self> {
        validate_warp_size(warp_size)?;
        if tasks.is_empty() {
            return Err(Error::InvalidBatch("batch has no tasks".into()));
        }
        for (i, task) in tasks.iter().enumerate() {
            if task.index != i as u32 + 1 {
                return Err(Error::InvalidBatch(format!(
                    "task at position {i} has index {}; indices must run 1..=N in order",
                    task.index
                )));
            }
            if task.shape.n == 0 || task.shape.k == 0 {
                return Err(Error::InvalidBatch(format!(
                    "task {} has degenerate shape {:?} (n and k must be >= 1)",
                    task.index, task.shape
                )));
            }
        }
        Ok(Self { tasks, warp_size })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, index_1based: u32) -> &Task {
        &self.tasks[index_1based as usize - 1]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn warp_size(&self) -> u32 {
        self.warp_size
    }
}
