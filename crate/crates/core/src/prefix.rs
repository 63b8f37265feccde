//! Compressed tile-to-block mapping: inclusive prefix sums of per-task
//! tile counts, padded up to the warp size.
//!
//! The array stores, at position `i`, the total number of tiles required
//! by tasks `1..=i+1`. A thread block with index `B` belongs to the first
//! task whose inclusive prefix exceeds `B`; the warp-level decompression
//! lives in [`crate::simt`]. Batches that may contain empty tasks go
//! through [`build_nonempty_tile_prefix`], which drops them and records
//! the injection back to real task indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{validate_warp_size, StrategyCatalog, Task};

/// How entries past the logical length are filled.
///
/// Both fills compare greater than every valid block index, so mapping
/// results are identical under either; repeat-last is the default since it
/// needs no sentinel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    RepeatLast,
    MaxValue,
}

/// Inclusive prefix sums of per-task tile counts, padded to a multiple of
/// the warp size. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilePrefixArray {
    values: Vec<u64>,
    logical_len: usize,
    warp_size: u32,
    padding: PaddingMode,
}

impl TilePrefixArray {
    fn from_counts(
        counts: &[u64],
        warp_size: u32,
        padding: PaddingMode,
    ) -> Result<TilePrefixArray> {
        validate_warp_size(warp_size)?;
        debug_assert!(!counts.is_empty());
        let mut values = Vec::with_capacity(counts.len());
        let mut running = 0u64;
        for &count in counts {
            running = running.checked_add(count).ok_or(Error::Capacity)?;
            values.push(running);
        }
        let logical_len = values.len();
        let padded_len = logical_len.div_ceil(warp_size as usize) * warp_size as usize;
        let fill = match padding {
            PaddingMode::RepeatLast => running,
            PaddingMode::MaxValue => u64::MAX,
        };
        values.resize(padded_len, fill);
        Ok(TilePrefixArray {
            values,
            logical_len,
            warp_size,
            padding,
        })
    }

    /// The padded array, length a multiple of the warp size.
    pub fn values(&self) -> &[u64] {
        &self.values
    }

    /// Prefix values without the padding tail.
    pub fn logical_values(&self) -> &[u64] {
        &self.values[..self.logical_len]
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn padded_len(&self) -> usize {
        self.values.len()
    }

    pub fn warp_size(&self) -> u32 {
        self.warp_size
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    /// Total number of tiles, i.e. the number of thread blocks to launch.
    pub fn total_tiles(&self) -> u64 {
        self.values[self.logical_len - 1]
    }

    /// `values[i - 1]` with `values[-1] := 0`; the tile base of task `i`.
    pub fn base(&self, i: usize) -> u64 {
        if i == 0 {
            0
        } else {
            self.values[i - 1]
        }
    }
}

/// Strictly increasing map from non-empty task positions to real (1-based)
/// task indices in the batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Injection {
    sigma: Vec<u32>,
}

impl Injection {
    pub fn new(sigma: Vec<u32>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::InvalidInjection("empty injection".into()));
        }
        if sigma[0] == 0 {
            return Err(Error::InvalidInjection("task indices are 1-based".into()));
        }
        if sigma.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInjection(
                "sigma must be strictly increasing".into(),
            ));
        }
        Ok(Self { sigma })
    }

    /// Identity over `1..=n`, for batches without empty tasks.
    pub fn identity(n: usize) -> Self {
        Self {
            sigma: (1..=n as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Real task index for non-empty position `h` (0-based).
    pub fn real_index(&self, h: usize) -> u32 {
        self.sigma[h]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.sigma
    }

    pub fn is_identity(&self) -> bool {
        self.sigma
            .iter()
            .enumerate()
            .all(|(i, &v)| v == i as u32 + 1)
    }
}

/// Build the prefix array over all tasks. Every task must be non-empty;
/// a zero tile count is an error directing the caller to the extended path.
pub fn build_tile_prefix(
    tasks: &[Task],
    catalog: &StrategyCatalog,
    warp_size: u32,
    padding: PaddingMode,
) -> Result<TilePrefixArray> {
    if tasks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut counts = Vec::with_capacity(tasks.len());
    for task in tasks {
        let count = task.tile_count(catalog)?;
        if count == 0 {
            return Err(Error::EmptyTask { index: task.index });
        }
        counts.push(count);
    }
    TilePrefixArray::from_counts(&counts, warp_size, padding)
}

/// Build the prefix array over the non-empty tasks only, in original order,
/// plus the injection from non-empty positions back to real task indices.
pub fn build_nonempty_tile_prefix(
    tasks: &[Task],
    catalog: &StrategyCatalog,
    warp_size: u32,
    padding: PaddingMode,
) -> Result<(TilePrefixArray, Injection)> {
    let mut counts = Vec::new();
    let mut sigma = Vec::new();
    for task in tasks {
        let count = task.tile_count(catalog)?;
        if count > 0 {
            counts.push(count);
            sigma.push(task.index);
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let prefix = TilePrefixArray::from_counts(&counts, warp_size, padding)?;
    Ok((prefix, Injection::new(sigma)?))
}
