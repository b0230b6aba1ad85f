//! Named random sub-streams derived from one root seed.
//!
//! Each consumer (initialization, masking, batch sampling, ...) draws from its
//! own stream keyed by a name and an index, so editing one part of a
//! configuration never shifts the random numbers seen by another, and any
//! training step can be regenerated from `(seed, step)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for sub-stream `name` at position `index`.
pub fn derive(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(name.as_bytes())) ^ splitmix64(index.wrapping_add(1)))
}

/// Generator for sub-stream `name` at position `index`.
pub fn stream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(root, name, index))
}
