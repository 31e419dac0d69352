//! Seeded, portable randomness.
//!
//! Every random draw in this crate comes from a [`ChaCha8Rng`] keyed with
//! `seed_from_u64`. ChaCha is a fixed, platform-independent stream cipher, so
//! identical seeds give bit-identical draws on every target. Independent
//! streams (per record, per sequence, per decode step, per trial) get their
//! own seed from [`derive_seed`], which keeps results independent of how
//! work is scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th child stream of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_from_seed(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform01(rng: &mut Rng64) -> f64 {
    rng.random::<f64>()
}

/// Index `i` with probability `weights[i] / sum(weights)`.
///
/// Zero weights are never chosen. Falls back to the last positive weight when
/// rounding leaves the target past the running sum.
pub fn categorical(weights: &[f64], rng: &mut Rng64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = uniform01(rng) * total;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last_positive = i;
            if target < cum {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        let c = derive_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 0));
    }

    #[test]
    fn chacha_stream_is_pinned() {
        // Golden values guard against silent changes in the generator.
        let mut rng = rng_from_seed(42);
        let bits: Vec<u64> = (0..3).map(|_| uniform01(&mut rng).to_bits()).collect();
        assert_eq!(
            bits,
            [
                4604317194420431787,
                4606734539489062706,
                4601373070768303508
            ]
        );
        assert_eq!(derive_seed(7, 0), 13309476754707697221);
    }

    #[test]
    fn categorical_skips_zero_weights() {
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let i = categorical(&[0.0, 1.0, 0.0, 2.0], &mut rng);
            assert!(i == 1 || i == 3);
        }
    }
}
