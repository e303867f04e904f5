//! Named random streams derived from one master seed.
//!
//! Each consumer asks for a stream by name; the name selects a ChaCha stream
//! id, so adding a new consumer never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: &str = "init";
pub const STREAM_DATA: &str = "data";
pub const STREAM_HOLDOUT: &str = "holdout";

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; used to turn `(seed, index)` pairs into sub-seeds.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for the stream `name` under `master`.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(fnv1a(name));
    rng
}

/// Seed for the `index`-th item of stream `name` (e.g. the batch of iteration `index`).
pub fn sub_seed(master: u64, name: &str, index: u64) -> u64 {
    mix(mix(master ^ fnv1a(name)).wrapping_add(index))
}

/// Generator seeded from a plain `u64`.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
