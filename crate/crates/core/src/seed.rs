//! Seed derivation.
//!
//! A run has one root seed. Each component gets its own stream:
//! `derive_seed(root, tag, index)` hashes the tag with FNV-1a, mixes it with
//! the root and the index, and finishes with the SplitMix64 mixer. Streams
//! for different tags or indices are independent; the same inputs always
//! give the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: &str = "init";
pub const TAG_BATCH: &str = "batch";
pub const TAG_DROPOUT: &str = "dropout";
pub const TAG_POOL: &str = "pool";
pub const TAG_SYNTH: &str = "synth";

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(tag)).wrapping_add(index))
}

pub fn rng_for(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, index))
}
