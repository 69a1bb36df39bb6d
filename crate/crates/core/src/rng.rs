//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream keyed by a master seed
//! and a tuple of counters (frame, particle, purpose), so results do not
//! depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, mixed into the key so different consumers never share draws.
pub mod tag {
    pub const PROPAGATE: u64 = 1;
    pub const RESAMPLE: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const RENDER: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const DATASET: u64 = 6;
    pub const BENCH: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed and a list of counters.
pub fn derive_seed(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(seed: u64, counters: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, counters))
}
