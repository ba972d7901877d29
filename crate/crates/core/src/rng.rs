//! Deterministic RNG streams.
//!
//! Every random choice in the crate is drawn from a ChaCha stream derived
//! from a base seed plus a static purpose tag, so reruns with the same seed
//! reproduce byte-identical outputs and a training run can re-derive the
//! stream of any (phase, step) without replaying earlier steps.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for combining seed components.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Combine a base seed with a list of stream labels into one 64-bit seed.
pub fn derive(seed: u64, labels: &[u64]) -> u64 {
    let mut h = mix(seed ^ 0x5ca1ab1e_0ddba11);
    for &l in labels {
        h = mix(h ^ l);
    }
    h
}

/// ChaCha stream for a (seed, labels) pair.
pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, labels))
}

/// Stable label for a named stream ("render", "batch", ...).
pub fn label(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64; // FNV-1a
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, &[label("render"), 3]);
        let mut b = stream(7, &[label("render"), 3]);
        let xa: [u64; 4] = std::array::from_fn(|_| a.random());
        let xb: [u64; 4] = std::array::from_fn(|_| b.random());
        assert_eq!(xa, xb);
    }

    #[test]
    fn streams_with_different_labels_differ() {
        let mut a = stream(7, &[label("render")]);
        let mut b = stream(7, &[label("batch")]);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
