//! Portable hashing and pseudo-random draws used by the fabric.
//!
//! SplitMix64 (Steele, Lea and Flood) keyed by FNV-1a. Both are fixed integer
//! algorithms, so every draw is identical on every platform.

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Maps 64 random bits onto [0, 1).
pub fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A uniform [0, 1) draw fully determined by the seed and keys.
pub fn keyed_unit(seed: u64, keys: &[u64]) -> f64 {
    let mut h = splitmix64(seed);
    for k in keys {
        h = splitmix64(h ^ *k);
    }
    unit(h)
}
