//! Static batching of irregular workloads with a compressed tile-to-block
//! mapping, applied to Mixture-of-Experts inference planning.
//!
//! The pipeline: describe a batch of variably-shaped tasks ([`task`]),
//! compress the tile mapping into an inclusive prefix-sum array
//! ([`prefix`]), decompress it per block with an emulated warp vote
//! ([`simt`]), and dispatch each block to the task function for its type
//! ([`dispatch`]). The MoE layers sit on top: token routing becomes
//! per-expert token index buckets and a task per expert ([`moe`]), a
//! deterministic CPU executor computes the expert GEMMs through the index
//! arrays and checks them against a naive loop ([`executor`]), and an
//! analytic wave model scores traces against a device profile ([`cost`]).

pub mod cost;
pub mod dispatch;
pub mod error;
pub mod executor;
pub mod moe;
pub mod prefix;
pub mod rng;
pub mod scenario;
pub mod simt;
pub mod task;
pub mod workload;

pub use error::{Error, Result};
