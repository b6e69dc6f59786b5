//! Stable sub-seed derivation so independent concerns (per panel, per date,
//! per tree, ...) get independent RNG streams from one user-facing seed.
//!
//! The scheme is frozen: changing it would silently change every simulated
//! dataset and fitted ensemble, so it is pinned by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; advances `state` and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash of a tag string.
pub fn hash_tag(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a sub-seed from a root seed, a concern tag, and index coordinates.
pub fn derive(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut state = seed ^ hash_tag(tag);
    let mut out = splitmix64(&mut state);
    for &ix in indices {
        state ^= ix.wrapping_mul(0xff51_afd7_ed55_8ccd);
        out = splitmix64(&mut state);
    }
    out
}

/// RNG for one concern, keyed by `(seed, tag, indices)`.
pub fn rng(seed: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_is_stable() {
        // Frozen values: a change here means every seeded artifact changed.
        assert_eq!(derive(0, "x", &[]), derive(0, "x", &[]));
        assert_eq!(derive(42, "tree", &[0]), 14682244729277544334);
        assert_eq!(derive(42, "tree", &[1]), 16914903843208438687);
        assert_eq!(derive(42, "gain", &[0]), 13007133784345603765);
    }

    #[test]
    fn concerns_are_independent() {
        assert_ne!(derive(1, "a", &[]), derive(1, "b", &[]));
        assert_ne!(derive(1, "a", &[0]), derive(1, "a", &[1]));
        assert_ne!(derive(1, "a", &[0, 1]), derive(1, "a", &[1, 0]));
        assert_ne!(derive(1, "a", &[]), derive(2, "a", &[]));
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut r1 = rng(7, "noise", &[3, 9]);
        let mut r2 = rng(7, "noise", &[3, 9]);
        for _ in 0..8 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
