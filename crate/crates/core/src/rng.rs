//! Named, reproducible random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(master seed, purpose label, index)`. Streams with different keys are
//! independent, and the same key always yields the same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |hash, byte| {
        (hash ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the stream `(seed, label, index)`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(label)) ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn stream(seed: u64, label: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}
