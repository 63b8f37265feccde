//! Deterministic reference execution of planned MoE batches.
//!
//! The tile task function computes one output tile of one expert's GEMM
//! on the CPU, loading token rows through the expert's token index array.
//! The independent check is a naive per-expert loop over materialized
//! gathered tensors. Both paths accumulate in the same order (k ascending
//! inside a dot product, experts ascending into the combined output), so
//! agreement is bit-exact, not approximate.
//!
//! Element type is f64 everywhere; with integer-valued inputs of modest
//! magnitude every intermediate is exactly representable, which the
//! verification tests rely on.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use crate::dispatch::{
    launch, ExecPolicy, ExecutionTrace, MappingMode, TaskFuncRegistry, TileDemand,
};
use crate::error::{Error, Result};
use crate::moe::{MoePlan, RoutingTable};
use crate::task::{GemmShape, StrategyCatalog, Task, TilingStrategy};

/// Bytes per element reported in tile demands (f64).
pub const ELEM_BYTES: u64 = std::mem::size_of::<f64>() as u64;

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c));
        Self {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// k x k identity.
    pub fn identity(k: usize) -> Self {
        Self::from_fn(k, k, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Naive triple-loop matrix product, k ascending. This is the reference
/// route; the tile task function must not call it.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "inner dimensions must agree");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        for c in 0..b.cols {
            let mut acc = 0.0;
            for kk in 0..a.cols {
                acc += a.get(r, kk) * b.get(kk, c);
            }
            out.set(r, c, acc);
        }
    }
    out
}

/// Copy the bucket's token rows into a contiguous matrix, in bucket order.
pub fn materialize_gathered(bucket: &[u32], tokens: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(bucket.len(), tokens.cols());
    for (row, &t) in bucket.iter().enumerate() {
        for c in 0..tokens.cols() {
            out.set(row, c, tokens.get(t as usize, c));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Shared output regions
// ---------------------------------------------------------------------------

/// Output matrix writable by concurrent blocks. Tile partitioning makes
/// all writes disjoint; the optional shadow counter records per-element
/// write counts so that invariant can be asserted after a run.
pub struct SharedMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<UnsafeCell<f64>>,
    shadow: Option<Vec<AtomicU32>>,
}

// Writers target disjoint cells (the exactly-once tile cover); the shadow
// counters are atomic.
unsafe impl Sync for SharedMatrix {}

impl SharedMatrix {
    pub fn zeros(rows: usize, cols: usize, shadow: bool) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            cells: (0..n).map(|_| UnsafeCell::new(0.0)).collect(),
            shadow: shadow.then(|| (0..n).map(|_| AtomicU32::new(0)).collect()),
        }
    }

    /// # Safety
    ///
    /// No two concurrent calls may target the same `(r, c)`. The dispatch
    /// layer guarantees this: every output element belongs to exactly one
    /// tile, and every tile to exactly one block.
    #[inline]
    pub unsafe fn write(&self, r: usize, c: usize, v: f64) {
        let idx = r * self.cols + c;
        *self.cells[idx].get() = v;
        if let Some(shadow) = &self.shadow {
            shadow[idx].fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Consume into a plain matrix plus the shadow write counts, if any.
    pub fn finish(self) -> (Matrix, Option<Vec<u32>>) {
        let data: Vec<f64> = self.cells.into_iter().map(|c| c.into_inner()).collect();
        let counts = self
            .shadow
            .map(|s| s.into_iter().map(|c| c.into_inner()).collect());
        (
            Matrix {
                rows: self.rows,
                cols: self.cols,
                data,
            },
            counts,
        )
    }
}

// ---------------------------------------------------------------------------
// Tile geometry and demands
// ---------------------------------------------------------------------------

/// Clipped bounds of tile `l` within a task's output: row-major tile
/// enumeration, edge tiles clipped to the matrix extent.
pub fn tile_bounds(
    shape: GemmShape,
    strategy: &TilingStrategy,
    tile: u64,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let col_tiles = shape.n.div_ceil(strategy.tile_n);
    let row_tile = tile / col_tiles;
    let col_tile = tile % col_tiles;
    let r0 = row_tile * strategy.tile_m;
    let r1 = (r0 + strategy.tile_m).min(shape.m);
    let c0 = col_tile * strategy.tile_n;
    let c1 = (c0 + strategy.tile_n).min(shape.n);
    (r0 as usize..r1 as usize, c0 as usize..c1 as usize)
}

/// Demand one tile declares: `2 * rows * cols * k` flops and the element
/// traffic of its token rows, weight columns, and output tile.
pub fn tile_demand(shape: GemmShape, strategy: &TilingStrategy, tile: u64) -> TileDemand {
    let (rows, cols) = tile_bounds(shape, strategy, tile);
    let (rows, cols, k) = (rows.len() as u64, cols.len() as u64, shape.k);
    TileDemand {
        flops: 2 * rows * cols * k,
        bytes: (rows * k + k * cols + rows * cols) * ELEM_BYTES,
    }
}

/// Registry whose task functions declare demands without touching data;
/// used for cost estimation at scales where real execution is pointless.
pub fn demand_registry(catalog: &StrategyCatalog) -> TaskFuncRegistry<StrategyCatalog> {
    let mut registry = TaskFuncRegistry::new();
    for strategy in catalog.strategies() {
        registry = registry.register(strategy.id, |tile, task: &Task, cat: &StrategyCatalog| {
            let strategy = cat
                .get(task.kind)
                .expect("registered kinds come from the catalog");
            tile_demand(task.shape, strategy, tile)
        });
    }
    registry
}

/// Full dispatch trace with demands only; no data is touched.
pub fn demand_trace(
    plan: &crate::dispatch::BatchPlan,
    catalog: &StrategyCatalog,
) -> Result<ExecutionTrace> {
    let registry = demand_registry(catalog);
    launch(
        plan,
        &registry,
        catalog,
        ExecPolicy::Sequential,
        MappingMode::Broadcast,
    )
}

// ---------------------------------------------------------------------------
// Buffers and execution
// ---------------------------------------------------------------------------

/// Input tensors for one MoE step: the token matrix and one weight matrix
/// per expert.
#[derive(Debug, Clone)]
pub struct DeviceBuffers {
    pub tokens: Matrix,
    pub weights: Vec<Matrix>,
}

impl DeviceBuffers {
    pub fn new(tokens: Matrix, weights: Vec<Matrix>) -> Self {
        Self { tokens, weights }
    }

    fn validate(&self, plan: &MoePlan) -> Result<()> {
        let routing = &plan.routing;
        let shape = plan.weight_shape;
        if self.weights.len() != routing.num_experts as usize {
            return Err(Error::BufferMismatch(format!(
                "{} weight matrices for {} experts",
                self.weights.len(),
                routing.num_experts
            )));
        }
        for (slot, w) in self.weights.iter().enumerate() {
            if (w.rows() as u64, w.cols() as u64) != (shape.k, shape.n) {
                return Err(Error::BufferMismatch(format!(
                    "weight {} is {}x{}, expected {}x{}",
                    slot + 1,
                    w.rows(),
                    w.cols(),
                    shape.k,
                    shape.n
                )));
            }
        }
        if self.tokens.rows() != routing.num_tokens || self.tokens.cols() as u64 != shape.k {
            return Err(Error::BufferMismatch(format!(
                "token matrix is {}x{}, expected {}x{}",
                self.tokens.rows(),
                self.tokens.cols(),
                routing.num_tokens,
                shape.k
            )));
        }
        Ok(())
    }
}

/// Execution knobs for a run.
#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub policy: ExecPolicy,
    pub mapping: MappingMode,
    /// Allocate shadow write counters on every output element.
    pub shadow: bool,
    /// Greatest allowed |framework - oracle| during verification.
    pub tolerance: f64,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            policy: ExecPolicy::Sequential,
            mapping: MappingMode::Broadcast,
            shadow: false,
            tolerance: 0.0,
        }
    }
}

/// Everything a tile task function needs to run.
pub struct GemmContext<'a> {
    pub plan: &'a MoePlan,
    pub tokens: &'a Matrix,
    pub weights: &'a [Matrix],
    pub outputs: &'a [SharedMatrix],
}

/// One output tile of one expert GEMM, computed through the token index
/// array: `output[tile rows, tile cols] = gathered token rows x weight
/// columns`.
fn gemm_tile_taskfunc(tile: u64, task: &Task, ctx: &GemmContext<'_>) -> TileDemand {
    let strategy = ctx
        .plan
        .catalog
        .get(task.kind)
        .expect("plan construction validated task kinds");
    let (row_range, col_range) = tile_bounds(task.shape, strategy, tile);
    let bucket = ctx.plan.arrays.bucket_by_slot(task.params.bucket_ref);
    let weight = &ctx.weights[task.params.weight_ref];
    let out = &ctx.outputs[task.params.output_ref];
    let k = task.shape.k as usize;
    for r in row_range.clone() {
        let token_row = ctx.tokens.row(bucket[r] as usize);
        for c in col_range.clone() {
            let mut acc = 0.0;
            for (kk, &t) in token_row.iter().enumerate().take(k) {
                acc += t * weight.get(kk, c);
            }
            // Disjoint by the exactly-once tile cover.
            unsafe { out.write(r, c, acc) };
        }
    }
    tile_demand(task.shape, strategy, tile)
}

fn gemm_registry<'a>(catalog: &StrategyCatalog) -> TaskFuncRegistry<GemmContext<'a>> {
    let mut registry = TaskFuncRegistry::new();
    for strategy in catalog.strategies() {
        registry = registry.register(strategy.id, gemm_tile_taskfunc);
    }
    registry
}

/// Results of executing a planned MoE step.
pub struct MoeRunOutput {
    pub trace: ExecutionTrace,
    /// Per-expert output matrices, indexed by expert slot (id - 1); empty
    /// experts have 0-row outputs.
    pub per_expert: Vec<Matrix>,
    /// Per-token combined output, gate-weighted sum over each token's
    /// chosen experts in expert-ascending order.
    pub combined: Matrix,
    /// Shadow write counts per expert output, when requested.
    pub shadow_counts: Option<Vec<Vec<u32>>>,
}

/// Execute the batched framework over a planned MoE step.
pub fn run_moe(
    plan: &MoePlan,
    buffers: &DeviceBuffers,
    opts: &ExecOptions,
) -> Result<MoeRunOutput> {
    buffers.validate(plan)?;
    let n = plan.weight_shape.n as usize;
    let outputs: Vec<SharedMatrix> = plan
        .arrays
        .buckets()
        .iter()
        .map(|bucket| SharedMatrix::zeros(bucket.len(), n, opts.shadow))
        .collect();
    let trace = {
        let registry = gemm_registry(&plan.catalog);
        let ctx = GemmContext {
            plan,
            tokens: &buffers.tokens,
            weights: &buffers.weights,
            outputs: &outputs,
        };
        launch(&plan.plan, &registry, &ctx, opts.policy, opts.mapping)?
    };

    let mut per_expert = Vec::with_capacity(outputs.len());
    let mut shadow_counts = opts.shadow.then(Vec::new);
    for shared in outputs {
        let (matrix, counts) = shared.finish();
        per_expert.push(matrix);
        if let (Some(all), Some(counts)) = (&mut shadow_counts, counts) {
            all.push(counts);
        }
    }
    let combined = combine_outputs(&plan.routing, &plan.arrays, &per_expert, n);
    Ok(MoeRunOutput {
        trace,
        per_expert,
        combined,
        shadow_counts,
    })
}

/// Gate-weighted scatter of per-expert output rows into the per-token
/// combined output, experts ascending. The oracle uses the same order, so
/// float comparisons see identical accumulation.
fn combine_outputs(
    routing: &RoutingTable,
    arrays: &crate::moe::TokenIndexArrays,
    per_expert: &[Matrix],
    n: usize,
) -> Matrix {
    let mut combined = Matrix::zeros(routing.num_tokens, n);
    for expert in 1..=routing.num_experts {
        let out = &per_expert[expert as usize - 1];
        for (row, &t) in arrays.bucket(expert).iter().enumerate() {
            let token = t as usize;
            let choice = routing
                .choice_of(token, expert)
                .expect("bucket membership follows routing");
            let gate = routing.gate(token, choice);
            for c in 0..n {
                let v = combined.get(token, c) + gate * out.get(row, c);
                combined.set(token, c, v);
            }
        }
    }
    combined
}

/// The naive reference: a per-expert loop over materialized gathered
/// tensors, independent of the planner, mapping, and dispatch machinery.
pub fn naive_moe_oracle(
    routing: &RoutingTable,
    weights: &[Matrix],
    tokens: &Matrix,
) -> Result<Matrix> {
    if weights.len() != routing.num_experts as usize {
        return Err(Error::BufferMismatch(format!(
            "{} weight matrices for {} experts",
            weights.len(),
            routing.num_experts
        )));
    }
    let n = weights.first().map_or(0, |w| w.cols());
    let mut combined = Matrix::zeros(routing.num_tokens, n);
    for expert in 1..=routing.num_experts {
        // Derive membership directly from the routing table.
        let routed: Vec<usize> = (0..routing.num_tokens)
            .filter(|&t| routing.choice_of(t, expert).is_some())
            .collect();
        if routed.is_empty() {
            continue;
        }
        let mut gathered = Matrix::zeros(routed.len(), tokens.cols());
        for (row, &t) in routed.iter().enumerate() {
            for c in 0..tokens.cols() {
                gathered.set(row, c, tokens.get(t, c));
            }
        }
        let product = matmul(&gathered, &weights[expert as usize - 1]);
        for (row, &t) in routed.iter().enumerate() {
            let choice = routing.choice_of(t, expert).unwrap();
            let gate = routing.gate(t, choice);
            for c in 0..n {
                let v = combined.get(t, c) + gate * product.get(row, c);
                combined.set(t, c, v);
            }
        }
    }
    Ok(combined)
}

/// Outcome of a framework-vs-oracle comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub tiles_executed: u64,
    pub max_abs_diff: f64,
    pub exact_match: bool,
}

impl VerificationReport {
    /// Report for a step with nothing to execute.
    pub fn vacuous() -> Self {
        Self {
            tiles_executed: 0,
            max_abs_diff: 0.0,
            exact_match: true,
        }
    }
}

/// Run the framework over the plan and compare its combined output with
/// the naive oracle. A difference beyond the tolerance is an error
/// carrying the first offending coordinate.
pub fn run_and_verify(
    plan: &MoePlan,
    buffers: &DeviceBuffers,
    opts: &ExecOptions,
) -> Result<VerificationReport> {
    let run = run_moe(plan, buffers, opts)?;
    verify_against_oracle(&run, plan, buffers, opts.tolerance)
}

/// Compare an existing run's combined output against the naive oracle.
pub fn verify_against_oracle(
    run: &MoeRunOutput,
    plan: &MoePlan,
    buffers: &DeviceBuffers,
    tolerance: f64,
) -> Result<VerificationReport> {
    let oracle = naive_moe_oracle(&plan.routing, &buffers.weights, &buffers.tokens)?;
    compare_outputs(&run.combined, &oracle, tolerance, run.trace.len() as u64)
}

pub(crate) fn compare_outputs(
    got: &Matrix,
    expected: &Matrix,
    tolerance: f64,
    tiles_executed: u64,
) -> Result<VerificationReport> {
    let max_abs_diff = got.max_abs_diff(expected);
    if max_abs_diff > tolerance {
        for r in 0..got.rows() {
            for c in 0..got.cols() {
                if (got.get(r, c) - expected.get(r, c)).abs() > tolerance {
                    return Err(Error::Verification {
                        row: r,
                        col: c,
                        got: got.get(r, c),
                        expected: expected.get(r, c),
                        max_abs_diff,
                    });
                }
            }
        }
    }
    Ok(VerificationReport {
        tiles_executed,
        max_abs_diff,
        exact_match: max_abs_diff == 0.0,
    })
}
