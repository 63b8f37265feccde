//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown tiling strategy id {id}")]
    UnknownStrategy { id: u32 },

    #[error("invalid strategy catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("warp size {0} must be a power of two in [1, 64]")]
    InvalidWarpSize(u32),

    /// A task with zero tiles was handed to the strict prefix builder.
    /// Callers with possibly-empty tasks must use the non-empty variant.
    #[error("task {index} is empty (zero tiles); use the non-empty planning path")]
    EmptyTask { index: u32 },

    #[error("batch contains no non-empty tasks")]
    EmptyBatch,

    #[error("tile count overflows the prefix index type")]
    Capacity,

    #[error("block index {block} out of range (total tiles {total})")]
    MappingRange { block: u64, total: u64 },

    #[error("prefix logical length {len} exceeds warp size {warp}; use the chunked mapping")]
    PrefixExceedsWarp { len: usize, warp: u32 },

    #[error("invalid injection: {0}")]
    InvalidInjection(String),

    #[error("no task function registered for strategy {kind} (block {block})")]
    Dispatch { kind: u32, block: u64 },

    #[error("invalid routing table: {0}")]
    Routing(String),

    #[error("buffer mismatch: {0}")]
    BufferMismatch(String),

    #[error("cost model: {0}")]
    Model(String),

    #[error(
        "verification failed at ({row}, {col}): got {got}, expected {expected} \
         (max abs diff {max_abs_diff:e})"
    )]
    Verification {
        row: usize,
        col: usize,
        got: f64,
        expected: f64,
        max_abs_diff: f64,
    },

    #[error("invalid workload spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
