//! Named random streams derived from one run seed.
//!
//! Each component draws from its own stream (`"data"`, `"init"`, `"batch"`,
//! `"vat"`, `"meta"`, ...) so changing how much randomness one component
//! consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream `name` of run `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(splitmix(seed ^ fnv1a(name.as_bytes())))
}

/// Stream `name` with an extra index, e.g. one stream per outer loop.
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix(splitmix(seed ^ fnv1a(name.as_bytes())) ^ index))
}
