//! Workload spec files: the JSON schema the CLI and C API ingest.
//!
//! Two forms. A generic spec lists explicit tasks and tiling strategies:
//!
//! ```json
//! {
//!   "strategies": [{"id": 1, "tile_m": 64, "tile_n": 32}],
//!   "tasks": [{"kind": 1, "m": 100, "n": 70, "k": 33}]
//! }
//! ```
//!
//! An MoE spec describes one inference step; routing is either explicit
//! per-token choices or a named scenario:
//!
//! ```json
//! {
//!   "moe": {
//!     "num_tokens": 4096, "num_experts": 64, "top_k": 8,
//!     "weight_shape": [3584, 2560],
//!     "routing": {"scenario": "balanced"}
//!   }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dispatch::BatchPlan;
use crate::error::{Error, Result};
use crate::executor::{DeviceBuffers, Matrix};
use crate::moe::{
    build_moe_batch, BucketMode, MoeOptions, MoePlan, OrderingStrategy, RoutingTable, WeightShape,
};
use crate::prefix::PaddingMode;
use crate::scenario::{generate_routing, seeded_buffers, Scenario, ScenarioParams};
use crate::task::{
    Batch, GemmShape, StrategyCatalog, Task, TaskParams, TilingStrategy, DEFAULT_WARP_SIZE,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: u32,
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub id: u32,
    pub tile_m: u64,
    pub tile_n: u64,
}

/// Row-count threshold entry for strategy selection; `max_m` absent means
/// unbounded.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_m: Option<u64>,
    pub id: u32,
}

/// Either a named scenario (seed mandatory for `random`) or explicit
/// per-token choices with optional gates.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSpec {
    pub num_tokens: usize,
    pub num_experts: u32,
    pub top_k: u32,
    /// `[k, n]`.
    pub weight_shape: [u64; 2],
    pub routing: RoutingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<StrategySpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<SelectionSpec>>,
    /// Flat little-endian f64 file, `num_tokens x k` row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_file: Option<String>,
    /// Flat little-endian f64 file, `num_experts` blocks of `k x n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<StrategySpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<TaskSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warp_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<PaddingMode>,
}

/// A resolved MoE workload: catalog, generated or explicit routing, and
/// the originating spec (for buffer files).
#[derive(Debug, Clone)]
pub struct MoeWorkload {
    pub catalog: StrategyCatalog,
    pub routing: RoutingTable,
    pub shape: WeightShape,
    pub spec: MoeSpec,
}

/// A resolved workload, ready for planning.
#[derive(Debug, Clone)]
pub enum Workload {
    Generic {
        catalog: StrategyCatalog,
        batch: Batch,
    },
    Moe(Box<MoeWorkload>),
}

impl Workload {
    pub fn kind(&self) -> &'static str {
        match self {
            Workload::Generic { .. } => "generic",
            Workload::Moe(_) => "moe",
        }
    }
}

/// A workload taken through planning: batch, tile prefix, and injection
/// built, ready for dispatch or cost estimation.
pub enum PlannedWorkload {
    Generic {
        catalog: StrategyCatalog,
        plan: BatchPlan,
    },
    Moe {
        plan: Box<MoePlan>,
        spec: MoeSpec,
    },
}

impl PlannedWorkload {
    pub fn kind(&self) -> &'static str {
        match self {
            PlannedWorkload::Generic { .. } => "generic",
            PlannedWorkload::Moe { .. } => "moe",
        }
    }

    pub fn batch_plan(&self) -> &BatchPlan {
        match self {
            PlannedWorkload::Generic { plan, .. } => plan,
            PlannedWorkload::Moe { plan, .. } => &plan.plan,
        }
    }

    pub fn catalog(&self) -> &StrategyCatalog {
        match self {
            PlannedWorkload::Generic { catalog, .. } => catalog,
            PlannedWorkload::Moe { plan, .. } => &plan.catalog,
        }
    }
}

/// Resolve and plan a spec in one step.
pub fn plan_spec(
    spec: &WorkloadSpec,
    ordering: OrderingStrategy,
    bucket_mode: BucketMode,
) -> Result<PlannedWorkload> {
    match spec.resolve()? {
        Workload::Generic { catalog, batch } => {
            let plan = BatchPlan::build(batch, &catalog, spec.padding())?;
            Ok(PlannedWorkload::Generic { catalog, plan })
        }
        Workload::Moe(moe) => {
            let options = MoeOptions {
                ordering,
                bucket_mode,
                warp_size: spec.warp_size(),
                padding: spec.padding(),
            };
            let plan = build_moe_batch(&moe.routing, moe.shape, &moe.catalog, &options)?;
            Ok(PlannedWorkload::Moe {
                plan: Box::new(plan),
                spec: moe.spec,
            })
        }
    }
}

impl WorkloadSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn warp_size(&self) -> u32 {
        self.warp_size.unwrap_or(DEFAULT_WARP_SIZE)
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding.unwrap_or_default()
    }

    /// Validate and resolve into a [`Workload`]. Scenario routing is
    /// generated here, so the result is deterministic given the spec.
    pub fn resolve(&self) -> Result<Workload> {
        match (&self.tasks, &self.moe) {
            (Some(_), Some(_)) => Err(Error::Spec(
                "spec must be either generic (tasks + strategies) or moe, not both".into(),
            )),
            (None, None) => Err(Error::Spec(
                "spec must provide tasks + strategies, or an moe section".into(),
            )),
            (Some(tasks), None) => self.resolve_generic(tasks),
            (None, Some(moe)) => self.resolve_moe(moe),
        }
    }

    fn resolve_generic(&self, tasks: &[TaskSpec]) -> Result<Workload> {
        let strategies = self
            .strategies
            .as_ref()
            .ok_or_else(|| Error::Spec("generic spec requires a strategies list".into()))?;
        let catalog = build_catalog(strategies, None)?;
        if tasks.is_empty() {
            return Err(Error::Spec("generic spec has no tasks".into()));
        }
        let tasks: Vec<Task> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                Task::new(
                    i as u32 + 1,
                    t.kind,
                    GemmShape::new(t.m, t.n, t.k),
                    TaskParams::for_expert(i),
                )
            })
            .collect();
        for task in &tasks {
            catalog.get(task.kind)?;
        }
        let batch = Batch::new(tasks, self.warp_size()).map_err(|e| Error::Spec(e.to_string()))?;
        Ok(Workload::Generic { catalog, batch })
    }

    fn resolve_moe(&self, moe: &MoeSpec) -> Result<Workload> {
        if self.strategies.is_some() {
            return Err(Error::Spec(
                "strategies for an moe spec belong inside the moe section".into(),
            ));
        }
        let catalog = moe_catalog(moe)?;
        let shape = WeightShape::new(moe.weight_shape[0], moe.weight_shape[1]);
        if shape.k == 0 || shape.n == 0 {
            return Err(Error::Spec("weight_shape extents must be >= 1".into()));
        }
        let routing = self.resolve_routing(moe).map_err(|e| match e {
            Error::Routing(msg) => Error::Spec(msg),
            other => other,
        })?;
        Ok(Workload::Moe(Box::new(MoeWorkload {
            catalog,
            routing,
            shape,
            spec: moe.clone(),
        })))
    }

    fn resolve_routing(&self, moe: &MoeSpec) -> Result<RoutingTable> {
        let r = &moe.routing;
        match (&r.scenario, &r.choices) {
            (Some(_), Some(_)) => Err(Error::Spec(
                "routing must give a scenario or explicit choices, not both".into(),
            )),
            (None, None) => Err(Error::Spec(
                "routing must give a scenario or explicit choices".into(),
            )),
            (Some(scenario), None) => {
                if r.gates.is_some() {
                    return Err(Error::Spec("gates require explicit routing choices".into()));
                }
                generate_routing(
                    *scenario,
                    &ScenarioParams {
                        num_tokens: moe.num_tokens,
                        num_experts: moe.num_experts,
                        top_k: moe.top_k,
                        seed: r.seed,
                    },
                )
            }
            (None, Some(choices)) => {
                if choices.len() != moe.num_tokens {
                    return Err(Error::Spec(format!(
                        "explicit routing lists {} tokens, spec says {}",
                        choices.len(),
                        moe.num_tokens
                    )));
                }
                RoutingTable::new(moe.num_experts, moe.top_k, choices.clone(), r.gates.clone())
            }
        }
    }
}

/// Strategy catalog for an MoE spec: the bundled default unless the spec
/// carries its own strategies plus selection table.
pub fn moe_catalog(moe: &MoeSpec) -> Result<StrategyCatalog> {
    match (&moe.strategies, &moe.selection) {
        (None, None) => Ok(StrategyCatalog::moe_default()),
        (Some(s), Some(sel)) => build_catalog(s, Some(sel)),
        _ => Err(Error::Spec(
            "custom moe strategies require a selection table (and vice versa)".into(),
        )),
    }
}

fn build_catalog(
    strategies: &[StrategySpec],
    selection: Option<&[SelectionSpec]>,
) -> Result<StrategyCatalog> {
    let list: Vec<TilingStrategy> = strategies
        .iter()
        .map(|s| TilingStrategy::new(s.id, s.tile_m, s.tile_n))
        .collect();
    let selection = selection
        .map(|sel| {
            sel.iter()
                .map(|s| (s.max_m.unwrap_or(u64::MAX), s.id))
                .collect()
        })
        .unwrap_or_default();
    StrategyCatalog::new(list, selection).map_err(|e| Error::Spec(e.to_string()))
}

/// Buffers for an MoE run: loaded from the spec's flat binary files when
/// given, otherwise seeded integer data.
pub fn load_or_seed_buffers(
    moe: &MoeSpec,
    shape: WeightShape,
    base_dir: &Path,
    seed: u64,
) -> Result<DeviceBuffers> {
    let seeded = (moe.tokens_file.is_none() || moe.weights_file.is_none())
        .then(|| seeded_buffers(moe.num_tokens, moe.num_experts, shape, seed));
    let tokens = match &moe.tokens_file {
        Some(file) => read_matrix_f64le(&base_dir.join(file), moe.num_tokens, shape.k as usize)?,
        None => seeded.as_ref().unwrap().tokens.clone(),
    };
    let weights = match &moe.weights_file {
        Some(file) => read_matrices_f64le(
            &base_dir.join(file),
            moe.num_experts as usize,
            shape.k as usize,
            shape.n as usize,
        )?,
        None => seeded.unwrap().weights,
    };
    Ok(DeviceBuffers::new(tokens, weights))
}

/// Read a `rows x cols` row-major little-endian f64 matrix.
pub fn read_matrix_f64le(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = std::fs::read(path)?;
    let expected = rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::Spec(format!(
            "{} is {} bytes, expected {expected} for {rows}x{cols} f64",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(Matrix::from_fn(rows, cols, |r, c| data[r * cols + c]))
}

fn read_matrices_f64le(path: &Path, count: usize, rows: usize, cols: usize) -> Result<Vec<Matrix>> {
    let bytes = std::fs::read(path)?;
    let expected = count * rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::Spec(format!(
            "{} is {} bytes, expected {expected} for {count} blocks of {rows}x{cols} f64",
            path.display(),
            bytes.len()
        )));
    }
    let block = rows * cols * 8;
    Ok((0..count)
        .map(|i| {
            let slice = &bytes[i * block..(i + 1) * block];
            let mut data = Vec::with_capacity(rows * cols);
            for chunk in slice.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            Matrix::from_fn(rows, cols, |r, c| data[r * cols + c])
        })
        .collect())
}

/// Serialize a matrix as flat little-endian f64, row-major.
pub fn write_matrix_f64le(path: &Path, matrix: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(matrix.data().len() * 8);
    for v in matrix.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generic_spec_round_trip() {
        let json = r#"{
            "strategies": [{"id": 1, "tile_m": 64, "tile_n": 32}],
            "tasks": [
                {"kind": 1, "m": 100, "n": 70, "k": 33},
                {"kind": 1, "m": 0, "n": 70, "k": 33}
            ]
        }"#;
        let spec = WorkloadSpec::from_json(json).unwrap();
        let workload = spec.resolve().unwrap();
        match workload {
            Workload::Generic { batch, catalog } => {
                assert_eq!(batch.len(), 2);
                assert_eq!(batch.task(1).tile_count(&catalog).unwrap(), 6);
                assert_eq!(batch.task(2).tile_count(&catalog).unwrap(), 0);
            }
            _ => panic!("expected generic workload"),
        }
    }

    #[test]
    fn moe_spec_with_scenario() {
        let json = r#"{
            "moe": {
                "num_tokens": 64, "num_experts": 8, "top_k": 2,
                "weight_shape": [16, 24],
                "routing": {"scenario": "balanced"}
            }
        }"#;
        let workload = WorkloadSpec::from_json(json).unwrap().resolve().unwrap();
        match workload {
            Workload::Moe(moe) => {
                assert_eq!(moe.routing.num_tokens, 64);
                assert_eq!(moe.shape, WeightShape::new(16, 24));
            }
            _ => panic!("expected moe workload"),
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        // top_k over num_experts.
        let bad_topk = r#"{"moe": {"num_tokens": 4, "num_experts": 2, "top_k": 3,
            "weight_shape": [4, 4], "routing": {"scenario": "best"}}}"#;
        assert!(matches!(
            WorkloadSpec::from_json(bad_topk).unwrap().resolve(),
            Err(Error::Spec(_))
        ));
        // Random without a seed.
        let no_seed = r#"{"moe": {"num_tokens": 4, "num_experts": 4, "top_k": 1,
            "weight_shape": [4, 4], "routing": {"scenario": "random"}}}"#;
        assert!(WorkloadSpec::from_json(no_seed).unwrap().resolve().is_err());
        // Both forms at once.
        let both = r#"{"tasks": [], "strategies": [],
            "moe": {"num_tokens": 1, "num_experts": 1, "top_k": 1,
                    "weight_shape": [1, 1], "routing": {"scenario": "best"}}}"#;
        assert!(WorkloadSpec::from_json(both).unwrap().resolve().is_err());
        // Unknown fields fail parsing outright.
        assert!(WorkloadSpec::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn explicit_routing_with_gates() {
        let json = r#"{
            "moe": {
                "num_tokens": 2, "num_experts": 3, "top_k": 2,
                "weight_shape": [4, 4],
                "routing": {"choices": [[1, 3], [2, 3]], "gates": [[0.25, 0.75], [0.5, 0.5]]}
            }
        }"#;
        let workload = WorkloadSpec::from_json(json).unwrap().resolve().unwrap();
        match workload {
            Workload::Moe(moe) => {
                assert_eq!(moe.routing.gate(0, 1), 0.75);
            }
            _ => panic!("expected moe workload"),
        }
    }

    #[test]
    fn flat_binary_matrix_round_trip() {
        let dir = std::env::temp_dir().join(format!("tilebatch-wl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.f64");
        let matrix = Matrix::from_rows(vec![vec![1.0, -2.5], vec![3.0, 4.0]]);
        write_matrix_f64le(&path, &matrix).unwrap();
        let back = read_matrix_f64le(&path, 2, 2).unwrap();
        assert_eq!(matrix, back);
        assert!(read_matrix_f64le(&path, 3, 2).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
