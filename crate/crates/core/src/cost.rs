//! Analytic wave cost model.
//!
//! Blocks run in waves of `sm_count` in trace order; a wave's time is the
//! larger of its aggregate compute time and memory time, so a wave mixing
//! compute-bound and memory-bound blocks overlaps the two resources. The
//! model deliberately ignores cross-wave overlap; it exists to make
//! ordering effects observable, not to predict absolute throughput.

use serde::{Deserialize, Serialize};

use crate::dispatch::ExecutionTrace;
use crate::error::{Error, Result};

/// Device peaks the model scores against. The flop peaks of the bundled
/// profiles follow the published Tensor Core numbers; bandwidths and SM
/// counts are estimates, not measured data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Blocks resident per wave.
    pub sm_count: u32,
    /// flops/second.
    pub peak_flops: f64,
    /// bytes/second.
    pub peak_bandwidth: f64,
}

impl DeviceProfile {
    pub fn new(name: &str, sm_count: u32, peak_flops: f64, peak_bandwidth: f64) -> Result<Self> {
        if sm_count == 0 || peak_flops <= 0.0 || peak_bandwidth <= 0.0 {
            return Err(Error::Model(format!(
                "profile {name:?} must have positive sm_count, peak_flops, peak_bandwidth"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            sm_count,
            peak_flops,
            peak_bandwidth,
        })
    }

    pub fn h20_like() -> Self {
        Self::new("h20-like", 78, 146e12, 4.0e12).unwrap()
    }

    pub fn h800_like() -> Self {
        Self::new("h800-like", 132, 989e12, 3.35e12).unwrap()
    }

    /// flops per byte above which a task saturates compute before memory.
    pub fn machine_balance(&self) -> f64 {
        self.peak_flops / self.peak_bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingResource {
    Compute,
    Memory,
}

/// One wave's aggregate demand and modeled time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveCost {
    pub index: u32,
    pub blocks: u32,
    pub flops: u64,
    pub bytes: u64,
    pub compute_time: f64,
    pub memory_time: f64,
    pub time: f64,
    pub bound: BindingResource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub profile: String,
    pub sm_count: u32,
    pub total_time: f64,
    pub achieved_flops: f64,
    pub peak_fraction: f64,
    pub total_flops: u64,
    pub total_bytes: u64,
    pub num_waves: u32,
    pub waves: Vec<WaveCost>,
}

impl CostReport {
    pub fn waves_csv(&self) -> String {
        let mut out = String::from("wave,blocks,flops,bytes,compute_time,memory_time,time,bound\n");
        for w in &self.waves {
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e},{:e},{}\n",
                w.index,
                w.blocks,
                w.flops,
                w.bytes,
                w.compute_time,
                w.memory_time,
                w.time,
                match w.bound {
                    BindingResource::Compute => "compute",
                    BindingResource::Memory => "memory",
                }
            ));
        }
        out
    }
}

/// Estimate execution time of a trace on a device profile.
pub fn estimate(trace: &ExecutionTrace, profile: &DeviceProfile) -> Result<CostReport> {
    if trace.is_empty() {
        return Err(Error::Model("trace is empty".into()));
    }
    let total_flops = trace.total_flops();
    let total_bytes = trace.total_bytes();
    if total_flops == 0 || total_bytes == 0 {
        return Err(Error::Model(
            "trace records carry no compute/memory demands".into(),
        ));
    }

    let mut waves = Vec::new();
    let mut total_time = 0.0f64;
    for (index, wave_records) in trace
        .records()
        .chunks(profile.sm_count as usize)
        .enumerate()
    {
        let flops: u64 = wave_records.iter().map(|r| r.demand.flops).sum();
        let bytes: u64 = wave_records.iter().map(|r| r.demand.bytes).sum();
        let compute_time = flops as f64 / profile.peak_flops;
        let memory_time = bytes as f64 / profile.peak_bandwidth;
        let time = compute_time.max(memory_time);
        total_time += time;
        waves.push(WaveCost {
            index: index as u32,
            blocks: wave_records.len() as u32,
            flops,
            bytes,
            compute_time,
            memory_time,
            time,
            bound: if compute_time >= memory_time {
                BindingResource::Compute
            } else {
                BindingResource::Memory
            },
        });
    }

    let achieved_flops = total_flops as f64 / total_time;
    Ok(CostReport {
        profile: profile.name.clone(),
        sm_count: profile.sm_count,
        total_time,
        achieved_flops,
        peak_fraction: achieved_flops / profile.peak_flops,
        total_flops,
        total_bytes,
        num_waves: waves.len() as u32,
        waves,
    })
}

/// Cost of one labeled scenario trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioCost {
    pub scenario: String,
    pub report: CostReport,
}

/// Score a set of labeled traces (typically best/balanced/worst generated
/// with identical token, expert, and weight parameters) under one profile.
pub fn scenario_compare(
    traces: &[(String, ExecutionTrace)],
    profile: &DeviceProfile,
) -> Result<Vec<ScenarioCost>> {
    traces
        .iter()
        .map(|(name, trace)| {
            Ok(ScenarioCost {
                scenario: name.clone(),
                report: estimate(trace, profile)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::{DispatchRecord, TileDemand};
    use proptest::prelude::*;

    fn trace_of(demands: &[(u64, u64)]) -> ExecutionTrace {
        let records: Vec<DispatchRecord> = demands
            .iter()
            .enumerate()
            .map(|(i, &(flops, bytes))| DispatchRecord {
                block: i as u64,
                nonempty_index: 0,
                task_index: 1,
                kind: 1,
                tile: i as u64,
                demand: TileDemand { flops, bytes },
            })
            .collect();
        ExecutionTrace::from_records(records)
    }

    fn toy_profile(sm: u32) -> DeviceProfile {
        DeviceProfile::new("toy", sm, 1e9, 1e9).unwrap()
    }

    #[test]
    fn single_block_closed_form() {
        let trace = trace_of(&[(2_000_000, 1_000)]);
        let report = estimate(&trace, &toy_profile(1)).unwrap();
        assert_eq!(report.total_time, 2e-3);
        assert_eq!(report.waves[0].bound, BindingResource::Compute);
        assert_eq!(report.peak_fraction, 1.0);
    }

    #[test]
    fn homogeneous_blocks_are_permutation_invariant() {
        let demands = vec![(1000u64, 2000u64); 12];
        let trace = trace_of(&demands);
        let report = estimate(&trace, &toy_profile(4)).unwrap();
        let mut rotated = demands.clone();
        rotated.rotate_left(5);
        let report2 = estimate(&trace_of(&rotated), &toy_profile(4)).unwrap();
        assert_eq!(report.total_time, report2.total_time);
    }

    #[test]
    fn mixing_bound_kinds_beats_grouping_them() {
        // Two waves of two blocks: pairing one compute-heavy with one
        // memory-heavy block per wave overlaps the resources. Exhaustive
        // over all orderings of the four blocks.
        let compute = (1_000_000u64, 10u64);
        let memory = (10u64, 1_000_000u64);
        let blocks = [compute, compute, memory, memory];
        let profile = toy_profile(2);

        let grouped = estimate(&trace_of(&blocks), &profile).unwrap().total_time;

        let mut best = f64::INFINITY;
        let mut perm = blocks;
        // All 4! orderings via simple index permutations.
        let idx = [0usize, 1, 2, 3];
        let mut orders = Vec::new();
        for &a in &idx {
            for &b in &idx {
                for &c in &idx {
                    for &d in &idx {
                        let chosen = [a, b, c, d];
                        let mut sorted = chosen;
                        sorted.sort_unstable();
                        if sorted == idx {
                            orders.push(chosen);
                        }
                    }
                }
            }
        }
        assert_eq!(orders.len(), 24);
        for order in orders {
            for (slot, &src) in order.iter().enumerate() {
                perm[slot] = blocks[src];
            }
            let t = estimate(&trace_of(&perm), &profile).unwrap().total_time;
            best = best.min(t);
        }
        let mixed = estimate(&trace_of(&[compute, memory, compute, memory]), &profile)
            .unwrap()
            .total_time;
        assert!(mixed < grouped);
        assert_eq!(mixed, best);
    }

    #[test]
    fn empty_or_demandless_traces_are_model_errors() {
        let empty = trace_of(&[]);
        assert!(matches!(
            estimate(&empty, &toy_profile(1)),
            Err(Error::Model(_))
        ));
        let no_demand = trace_of(&[(0, 0), (0, 0)]);
        assert!(matches!(
            estimate(&no_demand, &toy_profile(1)),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn bundled_profiles_are_valid() {
        for p in [DeviceProfile::h20_like(), DeviceProfile::h800_like()] {
            assert!(p.machine_balance() > 0.0);
        }
        assert!(DeviceProfile::new("bad", 0, 1.0, 1.0).is_err());
    }

    proptest! {
        // Lower bound: no ordering beats max(total_flops / peak_flops,
        // total_bytes / peak_bandwidth); adding a block never reduces the
        // total; identical inputs give identical reports.
        #[test]
        fn wave_model_bounds(
            demands in proptest::collection::vec((1u64..10_000, 1u64..10_000), 1..40),
            sm in 1u32..8,
            extra_flops in 1u64..10_000,
            extra_bytes in 1u64..10_000,
        ) {
            let profile = toy_profile(sm);
            let trace = trace_of(&demands);
            let report = estimate(&trace, &profile).unwrap();
            let lower = (report.total_flops as f64 / profile.peak_flops)
                .max(report.total_bytes as f64 / profile.peak_bandwidth);
            prop_assert!(report.total_time >= lower - 1e-15 * lower);
            prop_assert!(report.peak_fraction > 0.0 && report.peak_fraction <= 1.0 + 1e-12);

            let mut grown = demands.clone();
            grown.push((extra_flops, extra_bytes));
            let grown_report = estimate(&trace_of(&grown), &profile).unwrap();
            prop_assert!(grown_report.total_time >= report.total_time);

            let again = estimate(&trace_of(&demands), &profile).unwrap();
            prop_assert_eq!(report.total_time, again.total_time);
            prop_assert_eq!(report.peak_fraction, again.peak_fraction);
        }
    }
}
