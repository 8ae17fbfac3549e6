//! Seed derivation.
//!
//! Every random stream is keyed by `(root seed, stream index)` through a
//! SplitMix64 finalizer, so work items can be generated in any order or on
//! any thread and still see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream` of `root`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    mix(root.wrapping_add(GOLDEN.wrapping_mul(stream.wrapping_add(1))) ^ mix(stream))
}

pub fn stream_rng(root: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream))
}

/// Stream tags used inside one episode.
pub(crate) mod streams {
    pub const SHAPE: u64 = 1;
    pub const SUPPORT: u64 = 2;
    pub const CV_NOISE: u64 = 3;
    pub const QUERY: u64 = 4;
    pub const FOLDS: u64 = 5;
}
