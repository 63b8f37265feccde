//! MoE inference planning: turn a token routing table into a batch of
//! per-expert GEMM tasks.
//!
//! Each expert's multiplication is one task. Routing is inverted into a
//! token index array per expert so the executor can load token rows in
//! place instead of materializing gathered copies. Experts that received
//! no tokens stay in the batch as empty tasks and are dropped by the
//! non-empty prefix build, which records the injection back to them.
//! Expert order within the batch only shuffles the trace (and thus the
//! modeled wave mix), never the math.

use serde::{Deserialize, Serialize};

use crate::cost::DeviceProfile;
use crate::dispatch::BatchPlan;
use crate::error::{Error, Result};
use crate::prefix::PaddingMode;
use crate::rng::SplitMix64;
use crate::task::{Batch, GemmShape, StrategyCatalog, Task, TaskParams, DEFAULT_WARP_SIZE};

/// Expert weight extents shared by every expert: `k` reduction depth,
/// `n` output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightShape {
    pub k: u64,
    pub n: u64,
}

impl WeightShape {
    pub fn new(k: u64, n: u64) -> Self {
        Self { k, n }
    }
}

/// Per-token top-k expert choices. Expert ids are 1-based; token indices
/// are 0-based row indices into the token matrix. Gate weights are
/// optional; absent gates mean a uniform `1 / top_k` combine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingTable {
    pub num_tokens: usize,
    pub num_experts: u32,
    pub top_k: u32,
    pub choices: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<Vec<Vec<f64>>>,
}

impl RoutingTable {
    pub fn new(
        num_experts: u32,
        top_k: u32,
        choices: Vec<Vec<u32>>,
        gates: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::Routing("num_experts must be >= 1".into()));
        }
        if top_k == 0 || top_k > num_experts {
            return Err(Error::Routing(format!(
                "top_k {top_k} must be in [1, num_experts = {num_experts}]"
            )));
        }
        for (t, row) in choices.iter().enumerate() {
            if row.len() != top_k as usize {
                return Err(Error::Routing(format!(
                    "token {t} has {} choices, expected top_k = {top_k}",
                    row.len()
                )));
            }
            for &e in row {
                if e == 0 || e > num_experts {
                    return Err(Error::Routing(format!(
                        "token {t} routed to expert {e}, outside [1, {num_experts}]"
                    )));
                }
            }
            let mut sorted = row.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Routing(format!(
                    "token {t} has duplicate expert choices {row:?}"
                )));
            }
        }
        if let Some(g) = &gates {
            if g.len() != choices.len() {
                return Err(Error::Routing("gates must cover every token".into()));
            }
            if g.iter().zip(&choices).any(|(gr, cr)| gr.len() != cr.len()) {
                return Err(Error::Routing(
                    "each token's gates must align with its choices".into(),
                ));
            }
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Routing("gate weights must be finite".into()));
            }
        }
        Ok(Self {
            num_tokens: choices.len(),
            num_experts,
            top_k,
            choices,
            gates,
        })
    }

    /// Gate weight for the `j`-th choice of token `t`.
    pub fn gate(&self, token: usize, choice: usize) -> f64 {
        match &self.gates {
            Some(g) => g[token][choice],
            None => 1.0 / self.top_k as f64,
        }
    }

    /// Position of expert `e` among token `t`'s choices, if routed there.
    pub fn choice_of(&self, token: usize, expert: u32) -> Option<usize> {
        self.choices[token].iter().position(|&c| c == expert)
    }
}

/// How buckets are filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketMode {
    /// Tokens inserted in ascending token order; buckets sorted and
    /// deterministic.
    #[default]
    Stable,
    /// Emulates the atomic-counter scatter: tokens arrive in a seeded
    /// permutation order, so bucket order is arbitrary but the contents
    /// are the exact same multiset as stable mode.
    Scatter { seed: u64 },
}

/// Per-expert token index arrays: `buckets[e - 1]` lists the tokens routed
/// to expert `e`, each exactly once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenIndexArrays {
    buckets: Vec<Vec<u32>>,
}

impl TokenIndexArrays {
    pub fn buckets(&self) -> &[Vec<u32>] {
        &self.buckets
    }

    pub fn bucket(&self, expert: u32) -> &[u32] {
        &self.buckets[expert as usize - 1]
    }

    pub fn bucket_by_slot(&self, slot: usize) -> &[u32] {
        &self.buckets[slot]
    }

    pub fn num_experts(&self) -> u32 {
        self.buckets.len() as u32
    }

    pub fn load(&self, expert: u32) -> u64 {
        self.bucket(expert).len() as u64
    }

    pub fn total_entries(&self) -> u64 {
        self.buckets.iter().map(|b| b.len() as u64).sum()
    }
}

/// Invert the routing table into per-expert token buckets.
pub fn build_token_index_arrays(
    routing: &RoutingTable,
    mode: BucketMode,
) -> Result<TokenIndexArrays> {
    let mut buckets = vec![Vec::new(); routing.num_experts as usize];
    let order: Vec<u32> = match mode {
        BucketMode::Stable => (0..routing.num_tokens as u32).collect(),
        BucketMode::Scatter { seed } => {
            let mut order: Vec<u32> = (0..routing.num_tokens as u32).collect();
            SplitMix64::new(seed).shuffle(&mut order);
            order
        }
    };
    for &t in &order {
        for &e in &routing.choices[t as usize] {
            buckets[e as usize - 1].push(t);
        }
    }
    Ok(TokenIndexArrays { buckets })
}

/// Compute-bound or memory-bound, relative to a device profile's machine
/// balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundedness {
    ComputeBound,
    MemoryBound,
}

/// An expert's load and its derived busy/non-busy tag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpertWorkload {
    pub expert: u32,
    pub load: u64,
    pub boundedness: Boundedness,
}

impl ExpertWorkload {
    /// Classify by whole-GEMM arithmetic intensity `2mnk / bytes moved`
    /// against the profile's machine balance.
    pub fn classify(
        expert: u32,
        load: u64,
        shape: WeightShape,
        elem_bytes: u64,
        profile: &DeviceProfile,
    ) -> Self {
        let m = load as f64;
        let (k, n) = (shape.k as f64, shape.n as f64);
        let flops = 2.0 * m * n * k;
        let bytes = (m * k + k * n + m * n) * elem_bytes as f64;
        let boundedness = if flops / bytes >= profile.machine_balance() {
            Boundedness::ComputeBound
        } else {
            Boundedness::MemoryBound
        };
        Self {
            expert,
            load,
            boundedness,
        }
    }
}

/// Tag every expert's workload against a device profile.
pub fn classify_workloads(
    arrays: &TokenIndexArrays,
    shape: WeightShape,
    elem_bytes: u64,
    profile: &DeviceProfile,
) -> Vec<ExpertWorkload> {
    (1..=arrays.num_experts())
        .map(|e| ExpertWorkload::classify(e, arrays.load(e), shape, elem_bytes, profile))
        .collect()
}

/// Expert ordering strategies. `Natural` keeps id order; the other two
/// spread busy experts through the batch so a wave of blocks mixes
/// compute-bound and memory-bound work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingStrategy {
    #[default]
    Natural,
    /// Busiest half interleaved with the least-busy half:
    /// b1, s1, b2, s2, ...
    Alternating,
    /// The i-th busiest expert goes to the bit-reversed slot i, which
    /// maximizes the spacing between the busiest experts.
    HalfInterval,
}

/// Bit-reversal (van der Corput) permutation of `0..n`. For n not a power
/// of two, reversed values outside the range are skipped.
pub fn bit_reversal_permutation(n: usize) -> Vec<usize> {
    if n <= 1 {
        return (0..n).collect();
    }
    let width = usize::BITS - (n - 1).leading_zeros();
    let mut slots = Vec::with_capacity(n);
    for i in 0..1usize << width {
        let rev = i.reverse_bits() >> (usize::BITS - width);
        if rev < n {
            slots.push(rev);
        }
    }
    slots
}

/// Order experts by the chosen strategy; returns a permutation of expert
/// ids. Ties in load break toward the lower expert id.
pub fn order_experts(workloads: &[ExpertWorkload], strategy: OrderingStrategy) -> Vec<u32> {
    order_expert_loads(
        &workloads
            .iter()
            .map(|w| (w.expert, w.load))
            .collect::<Vec<_>>(),
        strategy,
    )
}

pub(crate) fn order_expert_loads(loads: &[(u32, u64)], strategy: OrderingStrategy) -> Vec<u32> {
    match strategy {
        OrderingStrategy::Natural => loads.iter().map(|&(e, _)| e).collect(),
        OrderingStrategy::Alternating => {
            let sorted = sorted_desc(loads);
            let half = sorted.len().div_ceil(2);
            let (busy, quiet) = sorted.split_at(half);
            let mut order = Vec::with_capacity(sorted.len());
            for i in 0..half {
                order.push(busy[i]);
                if i < quiet.len() {
                    order.push(quiet[i]);
                }
            }
            order
        }
        OrderingStrategy::HalfInterval => {
            let sorted = sorted_desc(loads);
            let slots = bit_reversal_permutation(sorted.len());
            let mut order = vec![0u32; sorted.len()];
            for (rank, &slot) in slots.iter().enumerate() {
                order[slot] = sorted[rank];
            }
            order
        }
    }
}

fn sorted_desc(loads: &[(u32, u64)]) -> Vec<u32> {
    let mut by_load: Vec<(u32, u64)> = loads.to_vec();
    by_load.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    by_load.into_iter().map(|(e, _)| e).collect()
}

/// One task per expert in natural expert order: `m` is the bucket length,
/// `(k, n)` come from the weight shape, and the type is picked by the
/// catalog's row-count thresholds. Empty buckets yield empty tasks.
pub fn plan_expert_tasks(
    arrays: &TokenIndexArrays,
    shape: WeightShape,
    catalog: &StrategyCatalog,
) -> Result<Vec<Task>> {
    let experts: Vec<u32> = (1..=arrays.num_experts()).collect();
    tasks_in_order(&experts, arrays, shape, catalog)
}

fn tasks_in_order(
    order: &[u32],
    arrays: &TokenIndexArrays,
    shape: WeightShape,
    catalog: &StrategyCatalog,
) -> Result<Vec<Task>> {
    order
        .iter()
        .enumerate()
        .map(|(position, &expert)| {
            let m = arrays.load(expert);
            let kind = catalog.select_for_rows(m)?;
            Ok(Task::new(
                position as u32 + 1,
                kind,
                GemmShape::new(m, shape.n, shape.k),
                TaskParams::for_expert(expert as usize - 1),
            ))
        })
        .collect()
}

/// Knobs for [`build_moe_batch`].
#[derive(Debug, Clone)]
pub struct MoeOptions {
    pub ordering: OrderingStrategy,
    pub bucket_mode: BucketMode,
    pub warp_size: u32,
    pub padding: PaddingMode,
}

impl Default for MoeOptions {
    fn default() -> Self {
        Self {
            ordering: OrderingStrategy::Natural,
            bucket_mode: BucketMode::Stable,
            warp_size: DEFAULT_WARP_SIZE,
            padding: PaddingMode::RepeatLast,
        }
    }
}

/// A planned MoE step: the routing and its inverted buckets, the expert
/// order, and the batch plan (tasks, non-empty tile prefix, injection).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoePlan {
    pub routing: RoutingTable,
    pub arrays: TokenIndexArrays,
    /// Expert id at each batch position (0-based position, 1-based id).
    pub order: Vec<u32>,
    pub weight_shape: WeightShape,
    pub catalog: StrategyCatalog,
    pub plan: BatchPlan,
}

impl MoePlan {
    pub fn batch(&self) -> &Batch {
        &self.plan.batch
    }

    pub fn total_tiles(&self) -> u64 {
        self.plan.total_tiles()
    }

    pub fn num_nonempty(&self) -> usize {
        self.plan.sigma.len()
    }

    /// Expert id owning the batch task with the given 1-based index.
    pub fn expert_of_task(&self, task_index: u32) -> u32 {
        self.order[task_index as usize - 1]
    }
}

/// Plan an MoE step: invert the routing, order the experts, and build the
/// non-empty tile prefix plus injection over the ordered tasks.
pub fn build_moe_batch(
    routing: &RoutingTable,
    shape: WeightShape,
    catalog: &StrategyCatalog,
    options: &MoeOptions,
) -> Result<MoePlan> {
    let arrays = build_token_index_arrays(routing, options.bucket_mode)?;
    if arrays.total_entries() == 0 {
        return Err(Error::EmptyBatch);
    }
    let loads: Vec<(u32, u64)> = (1..=routing.num_experts)
        .map(|e| (e, arrays.load(e)))
        .collect();
    let order = order_expert_loads(&loads, options.ordering);
    let tasks = tasks_in_order(&order, &arrays, shape, catalog)?;
    let batch = Batch::new(tasks, options.warp_size)?;
    let plan = BatchPlan::build(batch, catalog, options.padding)?;
    Ok(MoePlan {
        routing: routing.clone(),
        arrays,
        order,
        weight_shape: shape,
        catalog: catalog.clone(),
        plan,
    })
}
