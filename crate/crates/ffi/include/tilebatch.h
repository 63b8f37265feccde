/* C interface for the tilebatch static batching library. */

#ifndef TILEBATCH_H
#define TILEBATCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible entry point.
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_POINTER = 1,
  TB_STATUS_INVALID_ARGUMENT = 2,
  TB_STATUS_INVALID_SPEC = 3,
  TB_STATUS_EMPTY_BATCH = 4,
  TB_STATUS_OUT_OF_RANGE = 5,
  TB_STATUS_VERIFICATION_FAILED = 6,
  TB_STATUS_INTERNAL = 7,
} TbStatus;

// Opaque planned workload: batch, tile prefix array, and injection.
typedef struct TbPlan TbPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Build a plan from a workload spec JSON string.
//
// `ordering` is `"natural"`, `"alternating"`, or `"half_interval"`;
// `bucket_mode` is `"stable"` or `"scatter"` (seeded by `seed`).
//
// # Safety
// `spec_json`, `ordering`, and `bucket_mode` must be valid
// NUL-terminated strings; `out_plan` must be a valid pointer.
enum TbStatus tb_plan_from_spec_json(const char *spec_json,
                                     const char *ordering,
                                     const char *bucket_mode,
                                     uint64_t seed,
                                     struct TbPlan **out_plan);

// Release a plan. Null is a no-op.
//
// # Safety
// `plan` must be null or a pointer returned by
// [`tb_plan_from_spec_json`] that has not been freed.
void tb_plan_free(struct TbPlan *plan);

// Number of tasks in the batch (0 for a null plan).
//
// # Safety
// `plan` must be null or a live plan handle.
uint32_t tb_plan_num_tasks(const struct TbPlan *plan);

// Number of non-empty tasks (0 for a null plan).
//
// # Safety
// `plan` must be null or a live plan handle.
uint32_t tb_plan_num_nonempty(const struct TbPlan *plan);

// Total number of tiles, i.e. thread blocks to launch (0 for null).
//
// # Safety
// `plan` must be null or a live plan handle.
uint64_t tb_plan_total_tiles(const struct TbPlan *plan);

// Decompress one block index into its real task index (1-based) and the
// tile index inside that task.
//
// # Safety
// `plan` must be a live plan handle; out pointers must be valid or null.
enum TbStatus tb_plan_map_block(const struct TbPlan *plan,
                                uint64_t block,
                                uint32_t *out_task_index,
                                uint64_t *out_tile_index);

// Copy the logical tile prefix values. Call with a null `out_values` to
// query the required length through `out_len`.
//
// # Safety
// `plan` must be a live plan handle; `out_values` must be null or point
// to at least `capacity` elements; `out_len` must be null or valid.
enum TbStatus tb_plan_prefix(const struct TbPlan *plan,
                             uint64_t *out_values,
                             size_t capacity,
                             size_t *out_len);

// Copy the injection from non-empty positions to real task indices
// (1-based). Same two-call protocol as [`tb_plan_prefix`].
//
// # Safety
// As for [`tb_plan_prefix`].
enum TbStatus tb_plan_sigma(const struct TbPlan *plan,
                            uint32_t *out_values,
                            size_t capacity,
                            size_t *out_len);

// Execute an MoE spec with seeded data and verify against the naive
// reference; writes a verification report JSON on success (including the
// vacuous zero-token case). A mismatch returns
// `TB_STATUS_VERIFICATION_FAILED` with details in the last error.
//
// # Safety
// String arguments as in [`tb_plan_from_spec_json`]; `out_report_json`
// must be valid and is only written on success.
enum TbStatus tb_run_verify_json(const char *spec_json,
                                 const char *ordering,
                                 const char *bucket_mode,
                                 uint64_t seed,
                                 double tolerance,
                                 char **out_report_json);

// Estimate the cost of a spec under a device profile and write the
// report JSON. `profile` is `"h20"`, `"h800"`, or a profile JSON object.
//
// # Safety
// String arguments as in [`tb_plan_from_spec_json`]; `out_report_json`
// must be valid.
enum TbStatus tb_cost_json(const char *spec_json,
                           const char *profile,
                           const char *ordering,
                           char **out_report_json);

// Release a string returned by this library. Null is a no-op.
//
// # Safety
// `s` must be null or a string returned through a `char**` out-param of
// this library, not yet freed.
void tb_string_free(char *s);

// Thread-local message for the most recent failure on this thread.
// Valid until the next failing call on the same thread.
const char *tb_last_error_message(void);

// Library version as a static string.
const char *tb_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TILEBATCH_H */
