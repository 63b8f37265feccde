//! Per-block dispatch: decompress the mapping, resolve the real task
//! through the injection, and invoke the task function registered for its
//! type. `launch` drives this over every block of a plan and collects the
//! execution trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefix::{build_nonempty_tile_prefix, Injection, PaddingMode, TilePrefixArray};
use crate::simt::map_block_chunked;
use crate::task::{Batch, StrategyCatalog, StrategyId, Task};

/// Compute and memory demand one tile declares when it runs; consumed by
/// the cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileDemand {
    pub flops: u64,
    pub bytes: u64,
}

/// What one block ran: the non-empty position `h`, the real task `h~`
/// (1-based batch index), its type, the tile, and the declared demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub block: u64,
    pub nonempty_index: u32,
    pub task_index: u32,
    pub kind: StrategyId,
    pub tile: u64,
    pub demand: TileDemand,
}

/// Per-block records of a full launch, sorted by block index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionTrace {
    records: Vec<DispatchRecord>,
}

impl ExecutionTrace {
    /// Assemble a trace from records; sorts by block index.
    pub fn from_records(mut records: Vec<DispatchRecord>) -> Self {
        records.sort_by_key(|r| r.block);
        Self { records }
    }

    pub fn records(&self) -> &[DispatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_flops(&self) -> u64 {
        self.records.iter().map(|r| r.demand.flops).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.demand.bytes).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,nonempty_index,task_index,kind,tile,flops,bytes\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.block,
                r.nonempty_index,
                r.task_index,
                r.kind,
                r.tile,
                r.demand.flops,
                r.demand.bytes
            ));
        }
        out
    }
}

type TaskFn<C> = Box<dyn Fn(u64, &Task, &C) -> TileDemand + Send + Sync>;

/// Table of task functions, one per task type. The dispatch loop looks the
/// function up by the resolved task's type tag.
pub struct TaskFuncRegistry<C> {
    funcs: BTreeMap<StrategyId, TaskFn<C>>,
}

impl<C> Default for TaskFuncRegistry<C> {
    fn default() -> Self {
        Self::new()
    }
}

impl<C> TaskFuncRegistry<C> {
    pub fn new() -> Self {
        Self {
            funcs: BTreeMap::new(),
        }
    }

    pub fn register<F>(mut self, kind: StrategyId, func: F) -> Self
    where
        F: Fn(u64, &Task, &C) -> TileDemand + Send + Sync + 'static,
    {
        self.funcs.insert(kind, Box::new(func));
        self
    }

    pub fn contains(&self, kind: StrategyId) -> bool {
        self.funcs.contains_key(&kind)
    }

    fn get(&self, kind: StrategyId, block: u64) -> Result<&TaskFn<C>> {
        self.funcs.get(&kind).ok_or(Error::Dispatch { kind, block })
    }
}

/// How block evaluation is scheduled. Both policies produce identical
/// traces and outputs; blocks write disjoint output regions and the trace
/// is emitted sorted by block index either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    #[default]
    Sequential,
    Parallel {
        threads: usize,
    },
}

/// Whether the mapping is computed once per block or redundantly by every
/// warp of the block. Redundant warps must agree; this exists purely for
/// trace fidelity with the per-warp execution style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MappingMode {
    #[default]
    Broadcast,
    PerWarp {
        warps: u32,
    },
}

/// A batch together with its compressed mapping: the non-empty tile prefix
/// and the injection back to real task indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch: Batch,
    pub prefix: TilePrefixArray,
    pub sigma: Injection,
}

impl BatchPlan {
    /// Plan a batch: build the non-empty prefix array and injection. Works
    /// for batches with or without empty tasks.
    pub fn build(batch: Batch, catalog: &StrategyCatalog, padding: PaddingMode) -> Result<Self> {
        let (prefix, sigma) =
            build_nonempty_tile_prefix(batch.tasks(), catalog, batch.warp_size(), padding)?;
        Ok(Self {
            batch,
            prefix,
            sigma,
        })
    }

    pub fn total_tiles(&self) -> u64 {
        self.prefix.total_tiles()
    }
}

fn map_with_mode(prefix: &TilePrefixArray, block: u64, mode: MappingMode) -> Result<(u32, u64)> {
    let first = map_block_chunked(prefix, block)?;
    if let MappingMode::PerWarp { warps } = mode {
        for _ in 1..warps {
            let again = map_block_chunked(prefix, block)?;
            assert_eq!(
                (again.task_index, again.tile_index),
                (first.task_index, first.tile_index),
                "redundant warp mappings must agree"
            );
        }
    }
    Ok((first.task_index, first.tile_index))
}

/// Dispatch one block of a batch with no empty tasks: the mapping's task
/// position is the batch position.
pub fn dispatch_block<C>(
    batch: &Batch,
    prefix: &TilePrefixArray,
    registry: &TaskFuncRegistry<C>,
    ctx: &C,
    block: u64,
) -> Result<DispatchRecord> {
    let identity = Injection::identity(batch.len());
    dispatch_block_extended(batch, prefix, &identity, registry, ctx, block)
}

/// Dispatch one block through the two-stage mapping: block to non-empty
/// position `h`, then `h~ = sigma(h)` to the real task, whose registered
/// function is invoked with the tile index and the task's parameters.
pub fn dispatch_block_extended<C>(
    batch: &Batch,
    prefix: &TilePrefixArray,
    sigma: &Injection,
    registry: &TaskFuncRegistry<C>,
    ctx: &C,
    block: u64,
) -> Result<DispatchRecord> {
    dispatch_inner(
        batch,
        prefix,
        sigma,
        registry,
        ctx,
        block,
        MappingMode::Broadcast,
    )
}

fn dispatch_inner<C>(
    batch: &Batch,
    prefix: &TilePrefixArray,
    sigma: &Injection,
    registry: &TaskFuncRegistry<C>,
    ctx: &C,
    block: u64,
    mode: MappingMode,
) -> Result<DispatchRecord> {
    let (h, tile) = map_with_mode(prefix, block, mode)?;
    let real = sigma.real_index(h as usize);
    let task = batch.task(real);
    let func = registry.get(task.kind, block)?;
    let demand = func(tile, task, ctx);
    Ok(DispatchRecord {
        block,
        nonempty_index: h,
        task_index: real,
        kind: task.kind,
        tile,
        demand,
    })
}

/// Evaluate every block of the plan and collect the trace. Block order is
/// a scheduling detail; the trace is always sorted by block index, and
/// errors surface with the lowest offending block.
pub fn launch<C: Sync>(
    plan: &BatchPlan,
    registry: &TaskFuncRegistry<C>,
    ctx: &C,
    policy: ExecPolicy,
    mode: MappingMode,
) -> Result<ExecutionTrace> {
    let total = plan.total_tiles();
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    let run_range = |range: std::ops::Range<u64>| -> Result<Vec<DispatchRecord>> {
        let mut records = Vec::with_capacity((range.end - range.start) as usize);
        for block in range {
            records.push(dispatch_inner(
                &plan.batch,
                &plan.prefix,
                &plan.sigma,
                registry,
                ctx,
                block,
                mode,
            )?);
        }
        Ok(records)
    };

    let records = match policy {
        ExecPolicy::Sequential => run_range(0..total)?,
        ExecPolicy::Parallel { threads } => {
            let workers = threads.max(1).min(total as usize);
            let chunk = total.div_ceil(workers as u64);
            let results: Vec<Result<Vec<DispatchRecord>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers as u64)
                    .map(|w| {
                        let start = w * chunk;
                        let end = (start + chunk).min(total);
                        scope.spawn(move || run_range(start..end))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });
            let mut records = Vec::with_capacity(total as usize);
            for part in results {
                records.extend(part?);
            }
            records
        }
    };
    debug_assert!(records.windows(2).all(|w| w[0].block < w[1].block));
    Ok(ExecutionTrace { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefix::build_tile_prefix;
    use crate::task::{GemmShape, TaskParams, TilingStrategy};
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Mutex;

    // Two unit-tile task types so heterogeneous batches are expressible.
    fn two_kind_catalog() -> StrategyCatalog {
        StrategyCatalog::new(
            vec![TilingStrategy::new(1, 1, 1), TilingStrategy::new(2, 1, 1)],
            vec![],
        )
        .unwrap()
    }

    fn batch_from(counts_kinds: &[(u64, StrategyId)], warp_size: u32) -> Batch {
        let tasks: Vec<Task> = counts_kinds
            .iter()
            .enumerate()
            .map(|(i, &(count, kind))| {
                Task::new(
                    i as u32 + 1,
                    kind,
                    GemmShape::new(count, 1, 1),
                    TaskParams::for_expert(i),
                )
            })
            .collect();
        Batch::new(tasks, warp_size).unwrap()
    }

    #[derive(Default)]
    struct Recorder {
        calls: Mutex<Vec<(StrategyId, u32, u64)>>,
        count: AtomicU64,
    }

    fn recording_registry() -> TaskFuncRegistry<Recorder> {
        let record = |kind: StrategyId| {
            move |tile: u64, task: &Task, ctx: &Recorder| {
                ctx.calls.lock().unwrap().push((kind, task.index, tile));
                ctx.count.fetch_add(1, Ordering::Relaxed);
                TileDemand { flops: 1, bytes: 1 }
            }
        };
        TaskFuncRegistry::new()
            .register(1, record(1))
            .register(2, record(2))
    }

    #[test]
    fn singleton_batch_invokes_once_with_tile_zero() {
        let batch = batch_from(&[(1, 1)], 8);
        let catalog = two_kind_catalog();
        let prefix =
            build_tile_prefix(batch.tasks(), &catalog, 8, PaddingMode::RepeatLast).unwrap();
        let ctx = Recorder::default();
        let rec = dispatch_block(&batch, &prefix, &recording_registry(), &ctx, 0).unwrap();
        assert_eq!((rec.task_index, rec.kind, rec.tile), (1, 1, 0));
        assert_eq!(&*ctx.calls.lock().unwrap(), &[(1, 1, 0)]);
    }

    #[test]
    fn mapping_then_type_table_lookup() {
        // Prefix [3, 4, 8], block 5: third task, tile 1, type 1, params p_3.
        let batch = batch_from(&[(3, 1), (1, 2), (4, 1)], 8);
        let catalog = two_kind_catalog();
        let prefix =
            build_tile_prefix(batch.tasks(), &catalog, 8, PaddingMode::RepeatLast).unwrap();
        let ctx = Recorder::default();
        let rec = dispatch_block(&batch, &prefix, &recording_registry(), &ctx, 5).unwrap();
        assert_eq!((rec.task_index, rec.kind, rec.tile), (3, 1, 1));
        assert_eq!(batch.task(rec.task_index).params.weight_ref, 2);
    }

    #[test]
    fn every_tile_dispatched_exactly_once() {
        let batch = batch_from(&[(3, 1), (1, 2), (4, 1)], 8);
        let catalog = two_kind_catalog();
        let plan = BatchPlan::build(batch, &catalog, PaddingMode::RepeatLast).unwrap();
        let ctx = Recorder::default();
        let trace = launch(
            &plan,
            &recording_registry(),
            &ctx,
            ExecPolicy::Sequential,
            MappingMode::Broadcast,
        )
        .unwrap();
        assert_eq!(trace.len(), 8);
        let mut pairs: Vec<(u32, u64)> = trace
            .records()
            .iter()
            .map(|r| (r.task_index, r.tile))
            .collect();
        pairs.sort_unstable();
        let expected: Vec<(u32, u64)> = vec![
            (1, 0),
            (1, 1),
            (1, 2),
            (2, 0),
            (3, 0),
            (3, 1),
            (3, 2),
            (3, 3),
        ];
        assert_eq!(pairs, expected);
    }

    #[test]
    fn extended_dispatch_resolves_through_sigma() {
        // Counts [2, 0, 3], block 3: non-empty position 1, real task 3, tile 1.
        let batch = batch_from(&[(2, 1), (0, 1), (3, 2)], 8);
        let catalog = two_kind_catalog();
        let plan = BatchPlan::build(batch, &catalog, PaddingMode::RepeatLast).unwrap();
        let ctx = Recorder::default();
        let rec = dispatch_block_extended(
            &plan.batch,
            &plan.prefix,
            &plan.sigma,
            &recording_registry(),
            &ctx,
            3,
        )
        .unwrap();
        assert_eq!(rec.nonempty_index, 1);
        assert_eq!((rec.task_index, rec.tile, rec.kind), (3, 1, 2));
        assert_eq!(batch_params_ref(&plan, rec.task_index), 2);
    }

    fn batch_params_ref(plan: &BatchPlan, task_index: u32) -> usize {
        plan.batch.task(task_index).params.weight_ref
    }

    #[test]
    fn middle_only_nonempty_task_takes_all_blocks() {
        // Counts [0, 5, 0], block 4: real task 2, tile 4.
        let batch = batch_from(&[(0, 1), (5, 1), (0, 1)], 8);
        let catalog = two_kind_catalog();
        let plan = BatchPlan::build(batch, &catalog, PaddingMode::RepeatLast).unwrap();
        let ctx = Recorder::default();
        let rec = dispatch_block_extended(
            &plan.batch,
            &plan.prefix,
            &plan.sigma,
            &recording_registry(),
            &ctx,
            4,
        )
        .unwrap();
        assert_eq!((rec.task_index, rec.tile), (2, 4));
    }

    #[test]
    fn identity_sigma_matches_plain_dispatch() {
        let batch = batch_from(&[(3, 1), (2, 2)], 8);
        let catalog = two_kind_catalog();
        let prefix =
            build_tile_prefix(batch.tasks(), &catalog, 8, PaddingMode::RepeatLast).unwrap();
        let sigma = Injection::identity(batch.len());
        let registry = recording_registry();
        let ctx = Recorder::default();
        for block in 0..prefix.total_tiles() {
            let plain = dispatch_block(&batch, &prefix, &registry, &ctx, block).unwrap();
            let ext =
                dispatch_block_extended(&batch, &prefix, &sigma, &registry, &ctx, block).unwrap();
            assert_eq!(plain, ext);
        }
    }

    #[test]
    fn missing_task_function_is_a_dispatch_error() {
        let batch = batch_from(&[(1, 2)], 8);
        let catalog = two_kind_catalog();
        let prefix =
            build_tile_prefix(batch.tasks(), &catalog, 8, PaddingMode::RepeatLast).unwrap();
        let only_kind_one: TaskFuncRegistry<Recorder> =
            TaskFuncRegistry::new().register(1, |_, _, _| TileDemand::default());
        let ctx = Recorder::default();
        assert!(matches!(
            dispatch_block(&batch, &prefix, &only_kind_one, &ctx, 0),
            Err(Error::Dispatch { kind: 2, block: 0 })
        ));
    }

    #[test]
    fn heterogeneous_types_both_appear_in_trace() {
        let batch = batch_from(&[(2, 1), (3, 2)], 8);
        let catalog = two_kind_catalog();
        let plan = BatchPlan::build(batch, &catalog, PaddingMode::RepeatLast).unwrap();
        let ctx = Recorder::default();
        let trace = launch(
            &plan,
            &recording_registry(),
            &ctx,
            ExecPolicy::Sequential,
            MappingMode::Broadcast,
        )
        .unwrap();
        let kinds: Vec<StrategyId> = trace.records().iter().map(|r| r.kind).collect();
        assert_eq!(kinds, vec![1, 1, 2, 2, 2]);
        // Type soundness: invoked type equals the task's kind.
        for r in trace.records() {
            assert_eq!(r.kind, plan.batch.task(r.task_index).kind);
        }
    }

    #[test]
    fn parallel_matches_sequential_and_per_warp_agrees() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let counts: Vec<(u64, StrategyId)> = (0..50)
            .map(|_| (rng.next_below(6), 1 + rng.next_below(2) as u32))
            .collect();
        let batch = batch_from(&counts, 32);
        let catalog = two_kind_catalog();
        let plan = BatchPlan::build(batch, &catalog, PaddingMode::RepeatLast).unwrap();
        let registry = recording_registry();
        let ctx = Recorder::default();
        let seq = launch(
            &plan,
            &registry,
            &ctx,
            ExecPolicy::Sequential,
            MappingMode::Broadcast,
        )
        .unwrap();
        let par = launch(
            &plan,
            &registry,
            &ctx,
            ExecPolicy::Parallel { threads: 4 },
            MappingMode::PerWarp { warps: 4 },
        )
        .unwrap();
        assert_eq!(seq.records(), par.records());
    }
}
