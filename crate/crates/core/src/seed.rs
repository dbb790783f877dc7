//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream indices.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

// Stream tags, so that e.g. client sampling and local shuffling never share a stream.
pub const STREAM_KMEANS: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;
pub const STREAM_SAMPLING: u64 = 4;
pub const STREAM_CLIENT: u64 = 5;
pub const STREAM_WORLD: u64 = 6;
