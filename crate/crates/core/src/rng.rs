//! Seeded, platform-independent randomness.
//!
//! Every stochastic step in the pipeline (density control splits, scene
//! synthesis, weight init, text-token embedding) draws from a ChaCha8 stream
//! seeded explicitly, so identical seeds reproduce identical bits on any
//! platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// 64-bit FNV-1a over a byte string. Defined byte-wise, so the result is
/// independent of platform endianness.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    fnv1a64(label.as_bytes()) ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample in [0, 1) with 53 bits of precision.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform sample in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal via Box-Muller. Consumes exactly two draws per call so
/// streams stay aligned across platforms.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    #[cfg(not(feature = "std"))]
    use num_traits::Float;

    // (0, 1] so the logarithm stays finite.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
}

/// Seeded sample of `k` distinct indices out of `0..n`, ascending.
///
/// Partial Fisher-Yates over an index vector, so every k-subset is equally
/// likely.
pub fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> alloc::vec::Vec<usize> {
    assert!(k <= n);
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + (rng.next_u64() as usize) % (n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}
