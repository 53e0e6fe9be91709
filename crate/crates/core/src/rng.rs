//! Deterministic RNG streams. Every consumer (weight init, data shuffling,
//! Poisson encoding) draws from its own stream derived from the run seed and
//! a component name, so adding or removing one consumer never shifts the
//! randomness seen by another. That independence is what makes ablation runs
//! bitwise-comparable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Stream keyed by (seed, component).
pub fn stream(seed: u64, component: &str) -> ChaCha8Rng {
    substream(seed, component, 0)
}

/// Stream keyed by (seed, component, index); index distinguishes e.g. epochs.
pub fn substream(seed: u64, component: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(component.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal draws via Box-Muller on uniform doubles, scaled by `std`.
/// Sampling happens in f64 and converts once, so f32 and f64 builds see the
/// same underlying sequence.
pub fn normal_vec<F: Scalar>(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<F> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(F::from_f64(r * theta.cos() * std));
        if out.len() < len {
            out.push(F::from_f64(r * theta.sin() * std));
        }
    }
    out
}

pub fn uniform_vec<F: Scalar>(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<F> {
    (0..len)
        .map(|_| F::from_f64(rng.gen_range(lo..hi)))
        .collect()
}

/// Fisher-Yates shuffle of 0..n driven by the given stream.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
