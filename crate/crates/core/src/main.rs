//! Command-line front end: plan, run, verify, and cost-estimate batched
//! workloads described by JSON specs.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tilebatch::cost::{estimate, scenario_compare, CostReport, DeviceProfile};
use tilebatch::dispatch::{BatchPlan, ExecPolicy, ExecutionTrace, MappingMode};
use tilebatch::executor::{
    demand_trace, run_moe, verify_against_oracle, ExecOptions, VerificationReport,
};
use tilebatch::moe::{BucketMode, MoeOptions, OrderingStrategy};
use tilebatch::prefix::PaddingMode;
use tilebatch::scenario::{build_scenario_traces, ScenarioParams};
use tilebatch::task::StrategyCatalog;
use tilebatch::workload::{
    load_or_seed_buffers, moe_catalog, plan_spec, write_matrix_f64le, PlannedWorkload, WorkloadSpec,
};
use tilebatch::{Error, Result};

const PROFILE_ENV: &str = "TILEBATCH_PROFILE";

#[derive(Parser)]
#[command(
    name = "tilebatch",
    version,
    about = "Static batching of irregular workloads with compressed tile-to-block mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the batch plan (tile prefix, injection, ordering) for a spec
    Plan(PlanArgs),
    /// Execute a spec; for MoE specs, optionally verify against the naive
    /// reference loop
    Run(RunArgs),
    /// Estimate execution cost under a device profile
    Cost(CostArgs),
    /// Compare best/balanced/worst scenario costs for an MoE spec
    Scenarios(ScenariosArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderingArg {
    Natural,
    Alternating,
    HalfInterval,
}

impl From<OrderingArg> for OrderingStrategy {
    fn from(value: OrderingArg) -> Self {
        match value {
            OrderingArg::Natural => OrderingStrategy::Natural,
            OrderingArg::Alternating => OrderingStrategy::Alternating,
            OrderingArg::HalfInterval => OrderingStrategy::HalfInterval,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BucketModeArg {
    Stable,
    Scatter,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Args)]
struct PlanArgs {
    /// Workload spec JSON file
    spec: PathBuf,
    #[arg(long, value_enum, default_value_t = OrderingArg::Natural)]
    ordering: OrderingArg,
    #[arg(long, value_enum, default_value_t = BucketModeArg::Stable)]
    bucket_mode: BucketModeArg,
    /// Seed for scatter bucket emulation and generated data
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    spec: PathBuf,
    /// Compare the framework output against the naive reference loop
    #[arg(long)]
    verify: bool,
    #[arg(long, value_enum, default_value_t = OrderingArg::Natural)]
    ordering: OrderingArg,
    #[arg(long, value_enum, default_value_t = BucketModeArg::Stable)]
    bucket_mode: BucketModeArg,
    #[arg(long, value_enum, default_value_t = ExecArg::Sequential)]
    exec: ExecArg,
    /// Seed for scatter bucket emulation and generated data
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Greatest allowed |framework - reference| element difference
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    /// Write the full execution trace to this file
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Emit the trace as CSV instead of JSON
    #[arg(long)]
    csv: bool,
    /// Write the combined per-token output as flat little-endian f64
    #[arg(long)]
    combined_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    spec: PathBuf,
    /// Device profile: "h20", "h800", or a profile JSON path
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, value_enum, default_value_t = OrderingArg::Natural)]
    ordering: OrderingArg,
    #[arg(long, value_enum, default_value_t = BucketModeArg::Stable)]
    bucket_mode: BucketModeArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Emit the per-wave table as CSV instead of the JSON report
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScenariosArgs {
    spec: PathBuf,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long, value_enum, default_value_t = OrderingArg::Natural)]
    ordering: OrderingArg,
    /// Emit the comparison rows as CSV instead of JSON
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PlanReport {
    workload: &'static str,
    warp_size: u32,
    padding: PaddingMode,
    num_tasks: usize,
    num_nonempty: usize,
    num_empty: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    ordering: Option<OrderingStrategy>,
    /// Expert id at each batch position (MoE only).
    #[serde(skip_serializing_if = "Option::is_none")]
    order: Option<Vec<u32>>,
    /// Tokens per expert, in expert id order (MoE only).
    #[serde(skip_serializing_if = "Option::is_none")]
    loads: Option<Vec<u64>>,
    /// Tiles per task, in batch order.
    tile_counts: Vec<u64>,
    sigma: Vec<u32>,
    prefix: Vec<u64>,
    prefix_padded_len: usize,
    total_tiles: u64,
}

#[derive(Serialize)]
struct VerificationOutcome {
    passed: bool,
    tiles_executed: u64,
    max_abs_diff: f64,
    exact_match: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    first_mismatch: Option<MismatchDetail>,
}

#[derive(Serialize)]
struct MismatchDetail {
    row: usize,
    col: usize,
    got: f64,
    expected: f64,
}

#[derive(Serialize)]
struct RunReport {
    workload: &'static str,
    blocks: u64,
    total_flops: u64,
    total_bytes: u64,
    num_tasks: usize,
    num_nonempty: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ordering: Option<OrderingStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verification: Option<VerificationOutcome>,
}

#[derive(Serialize)]
struct CostOutput {
    workload: &'static str,
    profile: DeviceProfile,
    report: CostReport,
}

#[derive(Serialize)]
struct ScenarioRow {
    scenario: String,
    blocks: u64,
    total_time: f64,
    achieved_flops: f64,
    peak_fraction: f64,
    total_flops: u64,
    total_bytes: u64,
    num_waves: u32,
}

#[derive(Serialize)]
struct ScenariosOutput {
    profile: DeviceProfile,
    rows: Vec<ScenarioRow>,
}

// ---------------------------------------------------------------------------
// Command plumbing
// ---------------------------------------------------------------------------

fn bucket_mode(arg: BucketModeArg, seed: u64) -> BucketMode {
    match arg {
        BucketModeArg::Stable => BucketMode::Stable,
        BucketModeArg::Scatter => BucketMode::Scatter { seed },
    }
}

fn resolve_profile(arg: &Option<String>) -> Result<DeviceProfile> {
    let chosen = match arg {
        Some(s) => s.clone(),
        None => match std::env::var(PROFILE_ENV) {
            Ok(path) => path,
            Err(_) => "h800".to_string(),
        },
    };
    match chosen.as_str() {
        "h20" | "h20-like" => Ok(DeviceProfile::h20_like()),
        "h800" | "h800-like" => Ok(DeviceProfile::h800_like()),
        path => {
            let text = std::fs::read_to_string(path)?;
            let profile: DeviceProfile =
                serde_json::from_str(&text).map_err(|e| Error::Spec(e.to_string()))?;
            DeviceProfile::new(
                &profile.name,
                profile.sm_count,
                profile.peak_flops,
                profile.peak_bandwidth,
            )
        }
    }
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, content)?,
        None => println!("{content}"),
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn parallelism() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(4)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let spec = WorkloadSpec::from_path(&args.spec)?;
    let planned = plan_spec(
        &spec,
        args.ordering.into(),
        bucket_mode(args.bucket_mode, args.seed),
    )?;
    let report = match &planned {
        PlannedWorkload::Generic { catalog, plan } => PlanReport {
            workload: "generic",
            warp_size: plan.batch.warp_size(),
            padding: spec.padding(),
            num_tasks: plan.batch.len(),
            num_nonempty: plan.sigma.len(),
            num_empty: plan.batch.len() - plan.sigma.len(),
            ordering: None,
            order: None,
            loads: None,
            tile_counts: tile_counts(plan, catalog)?,
            sigma: plan.sigma.as_slice().to_vec(),
            prefix: plan.prefix.logical_values().to_vec(),
            prefix_padded_len: plan.prefix.padded_len(),
            total_tiles: plan.total_tiles(),
        },
        PlannedWorkload::Moe { plan, .. } => PlanReport {
            workload: "moe",
            warp_size: plan.batch().warp_size(),
            padding: spec.padding(),
            num_tasks: plan.batch().len(),
            num_nonempty: plan.num_nonempty(),
            num_empty: plan.batch().len() - plan.num_nonempty(),
            ordering: Some(args.ordering.into()),
            order: Some(plan.order.clone()),
            loads: Some(
                (1..=plan.routing.num_experts)
                    .map(|e| plan.arrays.load(e))
                    .collect(),
            ),
            tile_counts: tile_counts(&plan.plan, &plan.catalog)?,
            sigma: plan.plan.sigma.as_slice().to_vec(),
            prefix: plan.plan.prefix.logical_values().to_vec(),
            prefix_padded_len: plan.plan.prefix.padded_len(),
            total_tiles: plan.total_tiles(),
        },
    };
    emit(&args.out, &to_json(&report)?)
}

fn tile_counts(plan: &BatchPlan, catalog: &StrategyCatalog) -> Result<Vec<u64>> {
    plan.batch
        .tasks()
        .iter()
        .map(|t| t.tile_count(catalog))
        .collect()
}

fn cmd_run(args: &RunArgs) -> Result<bool> {
    let spec = WorkloadSpec::from_path(&args.spec)?;
    let base_dir = args
        .spec
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let planned = match plan_spec(
        &spec,
        args.ordering.into(),
        bucket_mode(args.bucket_mode, args.seed),
    ) {
        // A step with no routed tokens has nothing to execute; report the
        // vacuous outcome instead of failing.
        Err(Error::EmptyBatch) => {
            let report = RunReport {
                workload: if spec.moe.is_some() { "moe" } else { "generic" },
                blocks: 0,
                total_flops: 0,
                total_bytes: 0,
                num_tasks: 0,
                num_nonempty: 0,
                seed: args.seed,
                ordering: None,
                verification: args
                    .verify
                    .then(|| outcome_from_report(&VerificationReport::vacuous(), None)),
            };
            emit(&args.out, &to_json(&report)?)?;
            return Ok(true);
        }
        other => other?,
    };

    match planned {
        PlannedWorkload::Generic { catalog, plan } => {
            if args.verify {
                return Err(Error::Spec(
                    "--verify needs an moe spec; generic workloads have no reference data".into(),
                ));
            }
            let trace = demand_trace(&plan, &catalog)?;
            write_trace(args, &trace)?;
            let report = RunReport {
                workload: "generic",
                blocks: trace.len() as u64,
                total_flops: trace.total_flops(),
                total_bytes: trace.total_bytes(),
                num_tasks: plan.batch.len(),
                num_nonempty: plan.sigma.len(),
                seed: args.seed,
                ordering: None,
                verification: None,
            };
            emit(&args.out, &to_json(&report)?)?;
            Ok(true)
        }
        PlannedWorkload::Moe {
            plan,
            spec: moe_spec,
        } => {
            let buffers = load_or_seed_buffers(&moe_spec, plan.weight_shape, &base_dir, args.seed)?;
            let opts = ExecOptions {
                policy: match args.exec {
                    ExecArg::Sequential => ExecPolicy::Sequential,
                    ExecArg::Parallel => ExecPolicy::Parallel {
                        threads: parallelism(),
                    },
                },
                mapping: MappingMode::Broadcast,
                shadow: false,
                tolerance: args.tolerance,
            };
            let run = run_moe(&plan, &buffers, &opts)?;
            write_trace(args, &run.trace)?;
            if let Some(path) = &args.combined_out {
                write_matrix_f64le(path, &run.combined)?;
            }
            let (verification, passed) = if args.verify {
                match verify_against_oracle(&run, &plan, &buffers, args.tolerance) {
                    Ok(report) => (Some(outcome_from_report(&report, None)), true),
                    Err(Error::Verification {
                        row,
                        col,
                        got,
                        expected,
                        max_abs_diff,
                    }) => (
                        Some(VerificationOutcome {
                            passed: false,
                            tiles_executed: run.trace.len() as u64,
                            max_abs_diff,
                            exact_match: false,
                            first_mismatch: Some(MismatchDetail {
                                row,
                                col,
                                got,
                                expected,
                            }),
                        }),
                        false,
                    ),
                    Err(other) => return Err(other),
                }
            } else {
                (None, true)
            };
            let report = RunReport {
                workload: "moe",
                blocks: run.trace.len() as u64,
                total_flops: run.trace.total_flops(),
                total_bytes: run.trace.total_bytes(),
                num_tasks: plan.batch().len(),
                num_nonempty: plan.num_nonempty(),
                seed: args.seed,
                ordering: Some(args.ordering.into()),
                verification,
            };
            emit(&args.out, &to_json(&report)?)?;
            Ok(passed)
        }
    }
}

fn outcome_from_report(
    report: &VerificationReport,
    first_mismatch: Option<MismatchDetail>,
) -> VerificationOutcome {
    VerificationOutcome {
        passed: true,
        tiles_executed: report.tiles_executed,
        max_abs_diff: report.max_abs_diff,
        exact_match: report.exact_match,
        first_mismatch,
    }
}

fn write_trace(args: &RunArgs, trace: &ExecutionTrace) -> Result<()> {
    if let Some(path) = &args.trace_out {
        let content = if args.csv {
            trace.to_csv()
        } else {
            to_json(trace)?
        };
        std::fs::write(path, content)?;
    }
    Ok(())
}

fn cmd_cost(args: &CostArgs) -> Result<()> {
    let spec = WorkloadSpec::from_path(&args.spec)?;
    let profile = resolve_profile(&args.profile)?;
    let planned = plan_spec(
        &spec,
        args.ordering.into(),
        bucket_mode(args.bucket_mode, args.seed),
    )?;
    let (workload, trace) = match &planned {
        PlannedWorkload::Generic { catalog, plan } => ("generic", demand_trace(plan, catalog)?),
        PlannedWorkload::Moe { plan, .. } => ("moe", demand_trace(&plan.plan, &plan.catalog)?),
    };
    let report = estimate(&trace, &profile)?;
    if args.csv {
        emit(&args.out, report.waves_csv().trim_end())
    } else {
        emit(
            &args.out,
            &to_json(&CostOutput {
                workload,
                profile,
                report,
            })?,
        )
    }
}

fn cmd_scenarios(args: &ScenariosArgs) -> Result<()> {
    let spec = WorkloadSpec::from_path(&args.spec)?;
    let moe = spec
        .moe
        .as_ref()
        .ok_or_else(|| Error::Spec("scenarios requires an moe spec".into()))?;
    let catalog = moe_catalog(moe)?;
    let profile = resolve_profile(&args.profile)?;
    let params = ScenarioParams {
        num_tokens: moe.num_tokens,
        num_experts: moe.num_experts,
        top_k: moe.top_k,
        seed: moe.routing.seed,
    };
    let shape = tilebatch::moe::WeightShape::new(moe.weight_shape[0], moe.weight_shape[1]);
    let options = MoeOptions {
        ordering: args.ordering.into(),
        warp_size: spec.warp_size(),
        padding: spec.padding(),
        ..MoeOptions::default()
    };
    let traces = build_scenario_traces(&params, shape, &catalog, &options)?;
    let costs = scenario_compare(&traces, &profile)?;
    let rows: Vec<ScenarioRow> = costs
        .iter()
        .map(|c| ScenarioRow {
            scenario: c.scenario.clone(),
            blocks: c.report.waves.iter().map(|w| w.blocks as u64).sum(),
            total_time: c.report.total_time,
            achieved_flops: c.report.achieved_flops,
            peak_fraction: c.report.peak_fraction,
            total_flops: c.report.total_flops,
            total_bytes: c.report.total_bytes,
            num_waves: c.report.num_waves,
        })
        .collect();
    if args.csv {
        let mut csv = String::from(
            "scenario,blocks,total_time,achieved_flops,peak_fraction,total_flops,total_bytes,num_waves\n",
        );
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{:e},{:e},{},{},{},{}\n",
                r.scenario,
                r.blocks,
                r.total_time,
                r.achieved_flops,
                r.peak_fraction,
                r.total_flops,
                r.total_bytes,
                r.num_waves
            ));
        }
        emit(&args.out, csv.trim_end())
    } else {
        emit(&args.out, &to_json(&ScenariosOutput { profile, rows })?)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(args) => cmd_plan(args).map(|()| true),
        Command::Run(args) => cmd_run(args),
        Command::Cost(args) => cmd_cost(args).map(|()| true),
        Command::Scenarios(args) => cmd_scenarios(args).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Verification { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
