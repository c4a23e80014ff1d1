//! Seed derivation. Every random stream in a run is a ChaCha8 generator whose
//! seed is mixed from the experiment seed and a fixed set of stream labels,
//! so no two components ever share a stream and no ambient entropy is used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of labels.
pub fn derive(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(seed), |acc, &l| mix(acc ^ mix(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, labels))
}

// Stream labels.
pub const DATA_TRAIN: u64 = 1;
pub const DATA_TEST: u64 = 2;
pub const DATA_MEANS: u64 = 3;
pub const PARTITION: u64 = 4;
pub const INIT: u64 = 5;
pub const SAMPLING: u64 = 6;
pub const LOCAL_SGD: u64 = 7;
