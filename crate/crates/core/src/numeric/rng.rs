//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a seed and a list of tags
//! (epoch, batch, episode index, ...), so data for any position in a run can
//! be regenerated without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed ^ 0x1C11_0000);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0xA5A5_A5A5)));
    }
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        h = splitmix64(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream tags used across the crate.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const FROZEN: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const DAS: u64 = 7;
    pub const EXPORT: u64 = 8;
    pub const VALID: u64 = 9;
}
