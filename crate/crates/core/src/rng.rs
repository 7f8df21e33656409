//! Seed derivation. Every consumer of randomness gets its own ChaCha stream
//! keyed by `(seed, purpose, index)`, so results never depend on evaluation
//! order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TREE: u64 = 1;
pub const TRAJECTORY: u64 = 2;
pub const ODOMETRY: u64 = 3;
pub const LANDMARKS: u64 = 4;
pub const DEPTH: u64 = 5;
pub const FILTER: u64 = 6;
pub const SUITE: u64 = 7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a seed with a purpose tag.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    splitmix64(seed ^ splitmix64(purpose))
}

pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose));
    rng.set_stream(index);
    rng
}
