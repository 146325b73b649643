//! Seed plumbing. Every random routine takes an explicit generator; trial
//! seeds are derived from a master seed by a fixed mixing function so that
//! results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable hash of `(master, index)`; identical on every platform and run.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn trial_rng(master: u64, index: u64) -> Rng {
    rng_from_seed(derive_seed(master, index))
}
