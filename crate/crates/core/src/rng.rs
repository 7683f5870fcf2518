//! Deterministic seed splitting. Every random stream in a run is derived from
//! the run seed plus a path of integers, so per-image randomness does not
//! depend on which worker processes the image or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn child_rng(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags.
pub const STREAM_DATASET: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_AUGMENT: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_EVAL: u64 = 5;
