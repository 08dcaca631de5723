//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`], seeded from a
//! 64-bit integer. ChaCha output is specified bit-for-bit, so synthetic data
//! and augmentation streams are identical across runs and platforms. Work
//! that runs in parallel takes its own stream, seeded by [`derive_seed`] from
//! the global seed and a stable key (track id, epoch, pass), so the thread
//! schedule never changes the result.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; stable across toolchains unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives an independent stream seed from a parent seed, a string key and
/// integer coordinates.
pub fn derive_seed(seed: u64, key: &str, coords: &[u64]) -> u64 {
    let mut h = mix(seed ^ fnv1a(key.as_bytes()));
    for &c in coords {
        h = mix(h ^ c);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "real/0001", &[0, 1]);
        assert_eq!(a, derive_seed(7, "real/0001", &[0, 1]));
        assert_ne!(a, derive_seed(7, "real/0001", &[1, 0]));
        assert_ne!(a, derive_seed(8, "real/0001", &[0, 1]));
        assert_ne!(a, derive_seed(7, "real/0002", &[0, 1]));
    }

    #[test]
    fn stream_is_reproducible() {
        let mut r1 = rng_from_seed(42);
        let mut r2 = rng_from_seed(42);
        for _ in 0..16 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
