//! Deterministic random number generation.
//!
//! Every stochastic component in the crate (initialization, data generation,
//! batch shuffling, dropout) draws from this wrapper around ChaCha8, a
//! documented, portable, seedable stream cipher RNG. Identical seeds produce
//! identical streams on every platform, which is what makes bit-identical
//! reruns possible.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    chacha: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng { chacha: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Split off an independent child stream. The child seed mixes the next
    /// draw of this stream with a hash of `tag`, so differently-tagged
    /// children are decorrelated even when split at the same point.
    pub fn derive(&mut self, tag: &str) -> Rng {
        let raw: u64 = self.chacha.gen();
        Rng::from_seed(raw ^ fnv1a(tag.as_bytes()))
    }

    /// Uniform draw from the half-open interval `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.chacha.gen_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.chacha.gen_range(0..n)
    }

    /// Bernoulli draw with success probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.chacha.gen_range(0.0..1.0) < p
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.chacha);
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
