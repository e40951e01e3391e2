//! Desk-scale vision-language planner.
//!
//! A symbolic grid world supplies expert transitions; a small attention model
//! learns inverse and forward dynamics, is fine-tuned to emit the next action
//! and the next-state image, and is then refined with a joint
//! likelihood + policy-gradient objective scored by a dynamics-aware image
//! reward.

pub mod dynreward;
pub mod error;
pub mod evalbench;
pub mod genmodel;
pub mod gridworld;
pub mod lang;
pub mod objectives;
pub mod raster;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};

/// Derives an independent 64-bit seed for a sub-stream (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
