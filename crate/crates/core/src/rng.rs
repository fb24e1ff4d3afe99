//! Seeded random streams and stable hashing.
//!
//! Every stochastic step draws from a [`SearchRng`] derived from the run seed;
//! there is no wall-clock seeding anywhere in the crate.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SearchRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SearchRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a fresh seed for an independent child stream.
pub fn fork(rng: &mut SearchRng) -> SearchRng {
    seeded(rng.next_u64())
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive stable hash of a word sequence, independent of the
/// platform and of the std hasher implementation.
pub fn hash_words(seed: u64, words: impl IntoIterator<Item = u64>) -> u64 {
    words
        .into_iter()
        .fold(mix64(seed), |acc, w| mix64(acc ^ mix64(w)))
}

/// Maps a hash to the closed interval [-1, 1].
pub fn unit_symmetric(h: u64) -> f64 {
    let u = (h >> 11) as f64 / ((1u64 << 53) - 1) as f64;
    2.0 * u - 1.0
}
