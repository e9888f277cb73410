//! Stable seed derivation.
//!
//! Every stochastic component derives its own stream from the run seed plus
//! a purpose tag, so adding a consumer never shifts another one's draws.
//! The mixers are fixed algorithms (FNV-1a, splitmix64) rather than the
//! standard library hasher, which is not stable across toolchains.

/// FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a base seed and a purpose tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(tag.as_bytes()))
}

/// Derive a child seed from a base seed, a purpose tag, and integer keys.
pub fn derive_keyed(seed: u64, tag: &str, keys: &[u64]) -> u64 {
    let mut h = seed ^ fnv1a64(tag.as_bytes());
    for &k in keys {
        h = splitmix64(h ^ k);
    }
    splitmix64(h)
}
