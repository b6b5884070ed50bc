//! Deterministic sub-seed derivation.
//!
//! Every stochastic stage draws from its own ChaCha stream whose seed is a
//! hash of the master seed and a stage path, so stages can be re-run in
//! isolation and still reproduce the full pipeline bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a sequence of words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_5eed_5eed_5eed, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed for `(master, stage, index)`.
pub fn derive(master: u64, stage: &str, index: u64) -> u64 {
    mix(&[master, fnv1a(stage), index])
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(master: u64, stage: &str, index: u64) -> Rng {
    rng(derive(master, stage, index))
}
