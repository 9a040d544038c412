//! Platform-stable hashing and keyed random streams.
//!
//! Every random decision in the pipeline is drawn from a stream keyed by
//! `(seed, label, key)` so results do not depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over bytes, finished with a splitmix mix.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn hash_str(s: &str) -> u64 {
    hash_bytes(s.as_bytes())
}

/// Combine a seed with a domain label and a key into one 64-bit value.
pub fn keyed(seed: u64, label: &str, key: &str) -> u64 {
    splitmix64(splitmix64(seed ^ hash_str(label)) ^ hash_str(key))
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ hash_str(label))
}

pub fn stream(seed: u64, label: &str, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(keyed(seed, label, key))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
