//! Seeded random streams.
//!
//! Every consumer of randomness derives its own generator from
//! `(seed, tag, a, b)`, so streams never depend on how many draws another
//! component made. This is what keeps paired strategy runs on identical
//! partitions, participation draws and shift events.

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
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generator for the stream identified by `(seed, tag, a, b)`.
pub fn stream(seed: u64, tag: &str, a: u64, b: u64) -> StreamRng {
    let mut s = splitmix64(seed ^ fnv1a(tag));
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b.rotate_left(32));
    StreamRng::seed_from_u64(s)
}
