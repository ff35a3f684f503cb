//! Seeded RNG streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from a master seed plus a salt path, so runs replay bit-for-bit and
//! independent units of work (windows, tasks, epochs) can be processed in
//! any order without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Salts naming the independent consumers of randomness.
pub mod salt {
    pub const INIT: u64 = 0x01;
    pub const BATCH: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const SPLIT: u64 = 0x04;
    pub const SUBSAMPLE: u64 = 0x05;
    pub const SYNTH: u64 = 0x06;
    pub const TRANSFORM: u64 = 0x07;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a salt path into a single stream seed.
pub fn mix(seed: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &p in path {
        s = splitmix64(s ^ p);
    }
    s
}

/// Derive an independent ChaCha8 stream from `seed` and a salt path.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, path))
}
