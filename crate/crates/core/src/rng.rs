//! Seeded random streams. Per-unit streams are derived from `(seed, key)` by a
//! fixed hash, so results never depend on the order units are processed in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn master(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed))
}

/// Independent stream for `key` (typically a unit id) under `seed`.
pub fn stream(seed: u64, key: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(key.as_bytes())))
}

/// Independent stream for a named purpose (basis init, effects, ...).
pub fn substream(seed: u64, purpose: &str) -> Rng {
    stream(seed.wrapping_add(0x9E37_79B9_7F4A_7C15), purpose)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
