//! C ABI for the tilebatch library.
//!
//! Conventions:
//! - Functions return [`TbStatus`]; `TB_STATUS_OK` is 0.
//! - `TbPlan` is an opaque handle created by [`tb_plan_from_spec_json`]
//!   and released with [`tb_plan_free`].
//! - Strings returned through `char**` out-params are owned by the caller
//!   and must be released with [`tb_string_free`].
//! - On any non-OK status, [`tb_last_error_message`] returns a
//!   thread-local description valid until the next failing call on the
//!   same thread.
//!
//! The generated header lives at `include/tilebatch.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use tilebatch::error::Error;
use tilebatch::executor::run_and_verify;
use tilebatch::moe::{BucketMode, OrderingStrategy};
use tilebatch::simt::map_block_chunked;
use tilebatch::workload::{load_or_seed_buffers, plan_spec, PlannedWorkload, WorkloadSpec};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidSpec = 3,
    EmptyBatch = 4,
    OutOfRange = 5,
    VerificationFailed = 6,
    Internal = 7,
}

/// Opaque planned workload: batch, tile prefix array, and injection.
pub struct TbPlan {
    inner: PlannedWorkload,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> TbStatus {
    match err {
        Error::EmptyBatch => TbStatus::EmptyBatch,
        Error::MappingRange { .. } | Error::PrefixExceedsWarp { .. } => TbStatus::OutOfRange,
        Error::Verification { .. } => TbStatus::VerificationFailed,
        Error::UnknownStrategy { .. }
        | Error::InvalidCatalog(_)
        | Error::InvalidBatch(_)
        | Error::InvalidWarpSize(_)
        | Error::EmptyTask { .. }
        | Error::Routing(_)
        | Error::InvalidInjection(_)
        | Error::Spec(_)
        | Error::BufferMismatch(_)
        | Error::Model(_) => TbStatus::InvalidSpec,
        _ => TbStatus::Internal,
    }
}

fn fail(err: &Error) -> TbStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// # Safety: `ptr` must be null or a valid NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, TbStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(TbStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        TbStatus::InvalidArgument
    })
}

fn parse_ordering(name: &str) -> Result<OrderingStrategy, TbStatus> {
    match name {
        "natural" => Ok(OrderingStrategy::Natural),
        "alternating" => Ok(OrderingStrategy::Alternating),
        "half_interval" | "half-interval" => Ok(OrderingStrategy::HalfInterval),
        other => {
            set_error(&format!(
                "unknown ordering {other:?}; expected natural, alternating, or half_interval"
            ));
            Err(TbStatus::InvalidArgument)
        }
    }
}

fn parse_bucket_mode(name: &str, seed: u64) -> Result<BucketMode, TbStatus> {
    match name {
        "stable" => Ok(BucketMode::Stable),
        "scatter" => Ok(BucketMode::Scatter { seed }),
        other => {
            set_error(&format!(
                "unknown bucket mode {other:?}; expected stable or scatter"
            ));
            Err(TbStatus::InvalidArgument)
        }
    }
}

unsafe fn write_out_string(out: *mut *mut c_char, value: String) -> TbStatus {
    match CString::new(value.replace('\0', " ")) {
        Ok(cstring) => {
            *out = cstring.into_raw();
            TbStatus::Ok
        }
        Err(_) => {
            set_error("report contained an interior NUL byte");
            TbStatus::Internal
        }
    }
}

/// Build a plan from a workload spec JSON string.
///
/// `ordering` is `"natural"`, `"alternating"`, or `"half_interval"`;
/// `bucket_mode` is `"stable"` or `"scatter"` (seeded by `seed`).
///
/// # Safety
/// `spec_json`, `ordering`, and `bucket_mode` must be valid
/// NUL-terminated strings; `out_plan` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tb_plan_from_spec_json(
    spec_json: *const c_char,
    ordering: *const c_char,
    bucket_mode: *const c_char,
    seed: u64,
    out_plan: *mut *mut TbPlan,
) -> TbStatus {
    if out_plan.is_null() {
        set_error("out_plan is null");
        return TbStatus::NullPointer;
    }
    *out_plan = ptr::null_mut();
    let (spec_json, ordering, bucket_mode) = match (
        utf8_arg(spec_json, "spec_json"),
        utf8_arg(ordering, "ordering"),
        utf8_arg(bucket_mode, "bucket_mode"),
    ) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    let ordering = match parse_ordering(ordering) {
        Ok(o) => o,
        Err(s) => return s,
    };
    let bucket_mode = match parse_bucket_mode(bucket_mode, seed) {
        Ok(m) => m,
        Err(s) => return s,
    };
    let spec = match WorkloadSpec::from_json(spec_json) {
        Ok(spec) => spec,
        Err(e) => return fail(&e),
    };
    match plan_spec(&spec, ordering, bucket_mode) {
        Ok(planned) => {
            *out_plan = Box::into_raw(Box::new(TbPlan { inner: planned }));
            TbStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Release a plan. Null is a no-op.
///
/// # Safety
/// `plan` must be null or a pointer returned by
/// [`tb_plan_from_spec_json`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn tb_plan_free(plan: *mut TbPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

unsafe fn plan_ref<'a>(plan: *const TbPlan) -> Option<&'a TbPlan> {
    plan.as_ref()
}

/// Number of tasks in the batch (0 for a null plan).
///
/// # Safety
/// `plan` must be null or a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn tb_plan_num_tasks(plan: *const TbPlan) -> u32 {
    plan_ref(plan).map_or(0, |p| p.inner.batch_plan().batch.len() as u32)
}

/// Number of non-empty tasks (0 for a null plan).
///
/// # Safety
/// `plan` must be null or a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn tb_plan_num_nonempty(plan: *const TbPlan) -> u32 {
    plan_ref(plan).map_or(0, |p| p.inner.batch_plan().sigma.len() as u32)
}

/// Total number of tiles, i.e. thread blocks to launch (0 for null).
///
/// # Safety
/// `plan` must be null or a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn tb_plan_total_tiles(plan: *const TbPlan) -> u64 {
    plan_ref(plan).map_or(0, |p| p.inner.batch_plan().total_tiles())
}

/// Decompress one block index into its real task index (1-based) and the
/// tile index inside that task.
///
/// # Safety
/// `plan` must be a live plan handle; out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn tb_plan_map_block(
    plan: *const TbPlan,
    block: u64,
    out_task_index: *mut u32,
    out_tile_index: *mut u64,
) -> TbStatus {
    let Some(plan) = plan_ref(plan) else {
        set_error("plan is null");
        return TbStatus::NullPointer;
    };
    let batch_plan = plan.inner.batch_plan();
    match map_block_chunked(&batch_plan.prefix, block) {
        Ok(result) => {
            if !out_task_index.is_null() {
                *out_task_index = batch_plan.sigma.real_index(result.task_index as usize);
            }
            if !out_tile_index.is_null() {
                *out_tile_index = result.tile_index;
            }
            TbStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

unsafe fn copy_slice_out<T: Copy>(
    values: &[T],
    out_values: *mut T,
    capacity: usize,
    out_len: *mut usize,
) -> TbStatus {
    if !out_len.is_null() {
        *out_len = values.len();
    }
    if out_values.is_null() {
        return TbStatus::Ok; // length query
    }
    if capacity < values.len() {
        set_error(&format!(
            "buffer capacity {capacity} too small for {} entries",
            values.len()
        ));
        return TbStatus::OutOfRange;
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out_values, values.len());
    TbStatus::Ok
}

/// Copy the logical tile prefix values. Call with a null `out_values` to
/// query the required length through `out_len`.
///
/// # Safety
/// `plan` must be a live plan handle; `out_values` must be null or point
/// to at least `capacity` elements; `out_len` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn tb_plan_prefix(
    plan: *const TbPlan,
    out_values: *mut u64,
    capacity: usize,
    out_len: *mut usize,
) -> TbStatus {
    let Some(plan) = plan_ref(plan) else {
        set_error("plan is null");
        return TbStatus::NullPointer;
    };
    copy_slice_out(
        plan.inner.batch_plan().prefix.logical_values(),
        out_values,
        capacity,
        out_len,
    )
}

/// Copy the injection from non-empty positions to real task indices
/// (1-based). Same two-call protocol as [`tb_plan_prefix`].
///
/// # Safety
/// As for [`tb_plan_prefix`].
#[no_mangle]
pub unsafe extern "C" fn tb_plan_sigma(
    plan: *const TbPlan,
    out_values: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> TbStatus {
    let Some(plan) = plan_ref(plan) else {
        set_error("plan is null");
        return TbStatus::NullPointer;
    };
    copy_slice_out(
        plan.inner.batch_plan().sigma.as_slice(),
        out_values,
        capacity,
        out_len,
    )
}

/// Execute an MoE spec with seeded data and verify against the naive
/// reference; writes a verification report JSON on success (including the
/// vacuous zero-token case). A mismatch returns
/// `TB_STATUS_VERIFICATION_FAILED` with details in the last error.
///
/// # Safety
/// String arguments as in [`tb_plan_from_spec_json`]; `out_report_json`
/// must be valid and is only written on success.
#[no_mangle]
pub unsafe extern "C" fn tb_run_verify_json(
    spec_json: *const c_char,
    ordering: *const c_char,
    bucket_mode: *const c_char,
    seed: u64,
    tolerance: f64,
    out_report_json: *mut *mut c_char,
) -> TbStatus {
    if out_report_json.is_null() {
        set_error("out_report_json is null");
        return TbStatus::NullPointer;
    }
    *out_report_json = ptr::null_mut();
    let (spec_json, ordering, bucket_mode) = match (
        utf8_arg(spec_json, "spec_json"),
        utf8_arg(ordering, "ordering"),
        utf8_arg(bucket_mode, "bucket_mode"),
    ) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    let ordering = match parse_ordering(ordering) {
        Ok(o) => o,
        Err(s) => return s,
    };
    let bucket_mode = match parse_bucket_mode(bucket_mode, seed) {
        Ok(m) => m,
        Err(s) => return s,
    };
    let spec = match WorkloadSpec::from_json(spec_json) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let planned = match plan_spec(&spec, ordering, bucket_mode) {
        Ok(p) => p,
        Err(Error::EmptyBatch) => {
            let report = tilebatch::executor::VerificationReport::vacuous();
            return write_out_string(
                out_report_json,
                serde_json::to_string_pretty(&report).unwrap_or_default(),
            );
        }
        Err(e) => return fail(&e),
    };
    let PlannedWorkload::Moe { plan, spec: moe } = planned else {
        set_error("verification requires an moe spec");
        return TbStatus::InvalidSpec;
    };
    let buffers = match load_or_seed_buffers(&moe, plan.weight_shape, Path::new("."), seed) {
        Ok(b) => b,
        Err(e) => return fail(&e),
    };
    let opts = tilebatch::executor::ExecOptions {
        tolerance,
        ..Default::default()
    };
    match run_and_verify(&plan, &buffers, &opts) {
        Ok(report) => write_out_string(
            out_report_json,
            serde_json::to_string_pretty(&report).unwrap_or_default(),
        ),
        Err(e) => fail(&e),
    }
}

/// Estimate the cost of a spec under a device profile and write the
/// report JSON. `profile` is `"h20"`, `"h800"`, or a profile JSON object.
///
/// # Safety
/// String arguments as in [`tb_plan_from_spec_json`]; `out_report_json`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn tb_cost_json(
    spec_json: *const c_char,
    profile: *const c_char,
    ordering: *const c_char,
    out_report_json: *mut *mut c_char,
) -> TbStatus {
    if out_report_json.is_null() {
        set_error("out_report_json is null");
        return TbStatus::NullPointer;
    }
    *out_report_json = ptr::null_mut();
    let (spec_json, profile, ordering) = match (
        utf8_arg(spec_json, "spec_json"),
        utf8_arg(profile, "profile"),
        utf8_arg(ordering, "ordering"),
    ) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    let ordering = match parse_ordering(ordering) {
        Ok(o) => o,
        Err(s) => return s,
    };
    let profile = match parse_profile(profile) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let spec = match WorkloadSpec::from_json(spec_json) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let planned = match plan_spec(&spec, ordering, BucketMode::Stable) {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    let trace = match tilebatch::executor::demand_trace(planned.batch_plan(), planned.catalog()) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    match tilebatch::cost::estimate(&trace, &profile) {
        Ok(report) => write_out_string(
            out_report_json,
            serde_json::to_string_pretty(&report).unwrap_or_default(),
        ),
        Err(e) => fail(&e),
    }
}

fn parse_profile(text: &str) -> Result<tilebatch::cost::DeviceProfile, TbStatus> {
    use tilebatch::cost::DeviceProfile;
    match text {
        "h20" | "h20-like" => Ok(DeviceProfile::h20_like()),
        "h800" | "h800-like" => Ok(DeviceProfile::h800_like()),
        json if json.trim_start().starts_with('{') => {
            let profile: DeviceProfile = serde_json::from_str(json).map_err(|e| {
                set_error(&format!("invalid profile JSON: {e}"));
                TbStatus::InvalidArgument
            })?;
            DeviceProfile::new(
                &profile.name,
                profile.sm_count,
                profile.peak_flops,
                profile.peak_bandwidth,
            )
            .map_err(|e| {
                set_error(&e.to_string());
                TbStatus::InvalidArgument
            })
        }
        other => {
            set_error(&format!(
                "unknown profile {other:?}; expected h20, h800, or a profile JSON object"
            ));
            Err(TbStatus::InvalidArgument)
        }
    }
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a string returned through a `char**` out-param of
/// this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Thread-local message for the most recent failure on this thread.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}
