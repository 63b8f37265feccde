//! Routing scenario generators and seeded test data.
//!
//! Three named load shapes: `balanced` spreads tokens evenly over all
//! experts, `best` routes every token to the same `top_k` experts, and
//! `worst` does the same except each remaining expert receives exactly
//! one token, degrading those tasks into extreme memory-bound cases.
//! `random` draws per-token choices from a seeded RNG.

use serde::{Deserialize, Serialize};

use crate::dispatch::ExecutionTrace;
use crate::error::{Error, Result};
use crate::executor::{demand_trace, DeviceBuffers, Matrix};
use crate::moe::{build_moe_batch, MoeOptions, RoutingTable, WeightShape};
use crate::rng::SplitMix64;
use crate::task::StrategyCatalog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Balanced,
    Best,
    Worst,
    Random,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Balanced => "balanced",
            Scenario::Best => "best",
            Scenario::Worst => "worst",
            Scenario::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScenarioParams {
    pub num_tokens: usize,
    pub num_experts: u32,
    pub top_k: u32,
    /// Required for `Scenario::Random` only.
    pub seed: Option<u64>,
}

/// Generate the routing table for a scenario.
pub fn generate_routing(scenario: Scenario, params: &ScenarioParams) -> Result<RoutingTable> {
    let n = params.num_experts;
    let top_k = params.top_k;
    if top_k == 0 || top_k > n {
        return Err(Error::Routing(format!(
            "top_k {top_k} must be in [1, num_experts = {n}]"
        )));
    }
    let choices: Vec<Vec<u32>> = match scenario {
        Scenario::Balanced => {
            // Rotate a window of top_k consecutive experts per token.
            (0..params.num_tokens)
                .map(|t| {
                    (0..top_k)
                        .map(|j| ((t as u64 * top_k as u64 + j as u64) % n as u64) as u32 + 1)
                        .collect()
                })
                .collect()
        }
        Scenario::Best => (0..params.num_tokens)
            .map(|_| (1..=top_k).collect())
            .collect(),
        Scenario::Worst => {
            let lonely = n - top_k;
            if (params.num_tokens as u64) < lonely as u64 {
                return Err(Error::Routing(format!(
                    "worst case needs at least {lonely} tokens to feed every non-busy expert"
                )));
            }
            (0..params.num_tokens)
                .map(|t| {
                    if (t as u32) < lonely {
                        // One lonely expert plus all busy experts except a
                        // rotating drop, keeping busy loads even.
                        let dropped = (t as u32 % top_k) + 1;
                        let mut row = vec![top_k + 1 + t as u32];
                        row.extend((1..=top_k).filter(|&b| b != dropped));
                        row
                    } else {
                        (1..=top_k).collect()
                    }
                })
                .collect()
        }
        Scenario::Random => {
            let seed = params
                .seed
                .ok_or_else(|| Error::Routing("random scenario requires a seed".into()))?;
            let mut rng = SplitMix64::new(seed);
            let mut ids: Vec<u32> = (1..=n).collect();
            (0..params.num_tokens)
                .map(|_| {
                    rng.shuffle(&mut ids);
                    ids[..top_k as usize].to_vec()
                })
                .collect()
        }
    };
    RoutingTable::new(n, top_k, choices, None)
}

/// Demand-only traces for the three named scenarios, generated with
/// identical token/expert/weight parameters; input to the cost comparison.
pub fn build_scenario_traces(
    params: &ScenarioParams,
    shape: WeightShape,
    catalog: &StrategyCatalog,
    options: &MoeOptions,
) -> Result<Vec<(String, ExecutionTrace)>> {
    [Scenario::Best, Scenario::Balanced, Scenario::Worst]
        .into_iter()
        .map(|scenario| {
            let routing = generate_routing(scenario, params)?;
            let plan = build_moe_batch(&routing, shape, catalog, options)?;
            let trace = demand_trace(&plan.plan, &plan.catalog)?;
            Ok((scenario.name().to_string(), trace))
        })
        .collect()
}

/// Seeded integer-valued buffers in [-8, 8]; small integers keep the f64
/// arithmetic exact so verification can demand bit equality.
pub fn seeded_buffers(
    num_tokens: usize,
    num_experts: u32,
    shape: WeightShape,
    seed: u64,
) -> DeviceBuffers {
    let mut rng = SplitMix64::new(seed);
    let tokens = Matrix::from_fn(num_tokens, shape.k as usize, |_, _| {
        rng.next_int_inclusive(-8, 8) as f64
    });
    let weights = (0..num_experts)
        .map(|_| {
            Matrix::from_fn(shape.k as usize, shape.n as usize, |_, _| {
                rng.next_int_inclusive(-8, 8) as f64
            })
        })
        .collect();
    DeviceBuffers::new(tokens, weights)
}
