//! Warp-emulated decompression of the tile prefix array.
//!
//! A warp of `warp_size` lanes evaluates, per lane `t`, the predicate
//! `B >= prefix[t]`, votes the predicates into a bitmask, and takes the
//! population count as the number of tasks wholly before block `B`. The
//! emulation is bit-exact with respect to that procedure: lane `t`
//! contributes bit `t` of the mask, padded lanes read padded entries and
//! always vote false for in-range `B`.
//!
//! Task indices returned here are 0-based positions into the prefix
//! array's logical tasks; the dispatch layer translates them to 1-based
//! batch indices (through the injection when empty tasks were dropped).

use crate::error::{Error, Result};
use crate::prefix::TilePrefixArray;
use crate::task::{validate_warp_size, MAX_WARP_SIZE};

/// A warp of lockstep lanes; holds only the lane count, since votes are
/// pure. Masks are `u64`, which caps the warp at 64 lanes.
#[derive(Debug, Clone, Copy)]
pub struct Warp {
    warp_size: u32,
}

impl Warp {
    pub fn new(warp_size: u32) -> Result<Self> {
        validate_warp_size(warp_size)?;
        Ok(Self { warp_size })
    }

    pub fn size(&self) -> u32 {
        self.warp_size
    }

    /// Warp vote: bit `t` of the result is set iff lane `t`'s predicate is
    /// true. Requires exactly one predicate per lane.
    pub fn vote(&self, predicates: &[bool]) -> u64 {
        assert_eq!(
            predicates.len(),
            self.warp_size as usize,
            "one predicate per lane"
        );
        let mut mask = 0u64;
        for (lane, &p) in predicates.iter().enumerate() {
            if p {
                mask |= 1u64 << lane;
            }
        }
        mask
    }
}

/// Number of set bits in a vote mask.
pub fn popcount(mask: u64) -> u32 {
    mask.count_ones()
}

/// Result of decompressing one block index: the owning task (0-based
/// position in the prefix array) and the tile inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingResult {
    pub task_index: u32,
    pub tile_index: u64,
    pub block_index: u64,
}

fn check_block_range(prefix: &TilePrefixArray, block: u64) -> Result<()> {
    let total = prefix.total_tiles();
    if block >= total {
        return Err(Error::MappingRange { block, total });
    }
    Ok(())
}

/// Single-warp decompression: every lane `t` computes `B >= prefix[t]`,
/// the vote's population count is the task index, and the tile index is
/// `B` minus that task's tile base. Requires the logical prefix to fit in
/// one warp.
pub fn map_block_single_warp(prefix: &TilePrefixArray, block: u64) -> Result<MappingResult> {
    check_block_range(prefix, block)?;
    let warp = Warp::new(prefix.warp_size())?;
    if prefix.logical_len() > warp.size() as usize {
        return Err(Error::PrefixExceedsWarp {
            len: prefix.logical_len(),
            warp: warp.size(),
        });
    }
    let lanes = warp.size() as usize;
    let values = prefix.values();
    let mut predicates = [false; MAX_WARP_SIZE as usize];
    for t in 0..lanes {
        predicates[t] = block >= values[t];
    }
    let mask = warp.vote(&predicates[..lanes]);
    let h = popcount(mask);
    let base = if h > 0 { values[h as usize - 1] } else { 0 };
    Ok(MappingResult {
        task_index: h,
        tile_index: block - base,
        block_index: block,
    })
}

/// Chunked decompression for prefix arrays longer than one warp: the warp
/// scans the array a chunk at a time, accumulating the population counts.
/// A chunk with fewer votes than lanes means the owning task was found, so
/// the scan stops; the result matches a single warp of unbounded width.
pub fn map_block_chunked(prefix: &TilePrefixArray, block: u64) -> Result<MappingResult> {
    check_block_range(prefix, block)?;
    let warp = Warp::new(prefix.warp_size())?;
    let lanes = warp.size() as usize;
    let values = prefix.values();
    debug_assert_eq!(values.len() % lanes, 0);

    let mut h = 0u64;
    let mut predicates = [false; MAX_WARP_SIZE as usize];
    for chunk in values.chunks_exact(lanes) {
        for (t, &v) in chunk.iter().enumerate() {
            predicates[t] = block >= v;
        }
        let count = popcount(warp.vote(&predicates[..lanes]));
        h += count as u64;
        if (count as usize) < lanes {
            break;
        }
    }
    let base = if h > 0 { values[h as usize - 1] } else { 0 };
    Ok(MappingResult {
        task_index: h as u32,
        tile_index: block - base,
        block_index: block,
    })
}

/// Highest supported lane count for a vote mask.
pub const WARP_MASK_BITS: u32 = MAX_WARP_SIZE;
