//! Deterministic derivation of independent random streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Stream keyed by `(seed, tag, a, b)`. Distinct keys give statistically
/// independent generators; equal keys give identical ones.
pub fn substream(seed: u64, tag: &str, a: u64, b: u64) -> StreamRng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ fnv1a(tag));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b.rotate_left(17));
    ChaCha8Rng::seed_from_u64(h)
}
