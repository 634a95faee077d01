//! Seed splitting.
//!
//! Every stochastic stage draws from its own stream, derived from the run
//! seed and a stage tag: `derive_seed(seed, "surrogate")`,
//! `derive_seed(seed, "adapter")` and so on. Stages therefore stay
//! reproducible in isolation, and adding a stage never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the bytes of `s`. Stable across platforms and releases.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ splitmix64(hash_str(tag)))
}

pub fn derive_seed_n(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(seed, tag) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stage_rng(seed: u64, tag: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

pub fn rng_from(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_separate_streams() {
        assert_ne!(derive_seed(7, "surrogate"), derive_seed(7, "adapter"));
        assert_ne!(derive_seed(7, "adapter"), derive_seed(8, "adapter"));
        assert_eq!(derive_seed(7, "adapter"), derive_seed(7, "adapter"));
        assert_ne!(derive_seed_n(7, "x", 0), derive_seed_n(7, "x", 1));
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(hash_str(""), 0xcbf29ce484222325);
        assert_eq!(hash_str("a"), 0xaf63dc4c8601ec8c);
    }
}
