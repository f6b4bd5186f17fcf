//! Deterministic seed derivation.
//!
//! Every random draw in training is made from a generator seeded by the run
//! seed mixed with the coordinates of the draw (epoch, step, sample, stream),
//! so results do not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named streams so that draws for different purposes never collide.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SOURCE: u64 = 3;
    pub const TARGET: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const MIXUP: u64 = 6;
    pub const DEFORM: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const FAMILY: u64 = 9;
    pub const INIT: u64 = 10;
    pub const GENERATE: u64 = 11;
    pub const CORRUPT: u64 = 12;
    pub const RETRY: u64 = 13;
}
