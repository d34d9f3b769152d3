//! Stable seed derivation.
//!
//! Every random draw in the pipeline comes from a generator seeded by
//! [`derive`] over a tuple of integers, so work can be split across
//! threads (or skipped and resumed) without changing any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a sequence of integers into one 64-bit seed. Order-sensitive.
pub fn derive(parts: &[u64]) -> u64 {
    let mut h = 0x6a09_e667_f3bc_c908_u64 ^ parts.len() as u64;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// Hashes a short ASCII tag into a seed component.
pub const fn tag(name: &str) -> u64 {
    // FNV-1a
    let bytes = name.as_bytes();
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    h
}

pub fn rng(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_order_sensitive() {
        assert_ne!(derive(&[1, 2]), derive(&[2, 1]));
        assert_ne!(derive(&[1]), derive(&[1, 0]));
        assert_eq!(derive(&[7, 3, 9]), derive(&[7, 3, 9]));
    }

    #[test]
    fn tags_differ() {
        assert_ne!(tag("batch"), tag("pairs"));
    }
}
