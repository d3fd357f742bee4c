//! Seeded random streams keyed by `(seed, ...coordinates)`.
//!
//! Every stochastic step in the crate draws from a stream derived from the run
//! seed and a tuple of coordinates (iteration, prompt index, position, ...), so
//! results do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a seed and coordinates into one 64-bit key.
pub fn derive_key(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(mix64(seed), |acc, &c| mix64(acc ^ mix64(c)))
}

/// Hashes a token sequence to a stable 64-bit value.
pub fn hash_tokens(tokens: impl IntoIterator<Item = usize>) -> u64 {
    let mut acc = mix64(0x5eed);
    let mut len = 0u64;
    for t in tokens {
        acc = mix64(acc ^ (t as u64).wrapping_add(1));
        len += 1;
    }
    mix64(acc ^ len)
}

pub fn stream(seed: u64, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, coords))
}

/// Stream domains, so independent uses of the same coordinates never collide.
pub mod domain {
    pub const TASK_GEN: u64 = 1;
    pub const SUPERVISED: u64 = 2;
    pub const ROLLOUT_TEACHER: u64 = 3;
    pub const ROLLOUT_STUDENT: u64 = 4;
    pub const PROPOSAL: u64 = 5;
    pub const MINIBATCH: u64 = 6;
    pub const JUDGE_NOISE: u64 = 7;
    pub const ANALYSIS: u64 = 8;
}
