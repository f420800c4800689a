//! Stable hashing used for seed derivation and the deterministic mock backend.
//!
//! Everything here is defined in terms of SHA-256 so values are identical
//! across platforms, compiler versions and process runs. The recipe:
//!
//! 1. each input part is length-prefixed (u64 little-endian byte count),
//! 2. the prefixed parts are concatenated and fed to SHA-256,
//! 3. the first 8 digest bytes, read big-endian, form the `u64` result.

use sha2::{Digest, Sha256};

/// Hash a sequence of byte parts into a `u64`.
///
/// Parts are length-prefixed before hashing so `["ab", "c"]` and
/// `["a", "bc"]` produce different digests.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Map a hash to a float in `[0, 1)` using the top 53 bits.
pub fn unit_f64(hash: u64) -> f64 {
    (hash >> 11) as f64 / (1u64 << 53) as f64
}

/// Derive a child seed from a base seed and a purpose tag.
///
/// Used to give every agent call, pair draw and retry attempt its own
/// deterministic seed without threading RNG state through the pipeline.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    stable_hash64(&[b"tailor/derive-seed", &base.to_le_bytes(), tag.as_bytes()])
}

/// Lowercase hex of the top 8 bytes of a hash (16 characters).
pub fn hex16(hash: u64) -> String {
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_part_sensitive() {
        let a = stable_hash64(&[b"ab", b"c"]);
        let b = stable_hash64(&[b"a", b"bc"]);
        assert_ne!(a, b);
        assert_eq!(a, stable_hash64(&[b"ab", b"c"]));
    }

    #[test]
    fn unit_is_in_range() {
        for seed in 0..1000u64 {
            let u = unit_f64(stable_hash64(&[&seed.to_le_bytes()]));
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(7, "draw"), derive_seed(7, "rewrite"));
        assert_ne!(derive_seed(7, "draw"), derive_seed(8, "draw"));
    }

    #[test]
    fn hex16_is_sixteen_lowercase_chars() {
        let s = hex16(0x0123_4567_89ab_cdef);
        assert_eq!(s, "0123456789abcdef");
    }
}
