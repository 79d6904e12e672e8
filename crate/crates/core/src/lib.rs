//! Decoder-only language model with a hierarchical recurrent reasoning core
//! and a learned adaptive halting head, plus its training harness and
//! reasoning-depth analysis tooling.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod hrm;
pub mod model;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
