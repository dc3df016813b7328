//! Seed derivation. Every random draw comes from a ChaCha stream keyed by
//! `(seed, tag, index)`, so draws do not depend on the order in which other
//! streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_DISPLACE_X: u64 = 1;
pub const TAG_DISPLACE_Y: u64 = 2;
pub const TAG_HEIGHT: u64 = 3;
pub const TAG_REMOVE: u64 = 4;
pub const TAG_GOAL: u64 = 5;
pub const TAG_SEARCH: u64 = 6;
pub const TAG_EPISODE: u64 = 7;
pub const TAG_PERTURB: u64 = 8;
pub const TAG_ADVERSARY: u64 = 9;
pub const TAG_ENV: u64 = 10;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag and an index into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}
