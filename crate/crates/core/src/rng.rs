//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a derived seed and a stream number, so results do not
//! depend on batching or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const EVAL_NOISE: u64 = 4;
    pub const CORRUPT: u64 = 5;
    pub const LANDSCAPE: u64 = 6;
}
