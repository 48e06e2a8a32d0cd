//! Seeded random streams.
//!
//! Every stochastic routine draws from a ChaCha stream addressed by
//! `(seed, stream)`, so per-trial or per-user randomness is independent of
//! the order in which work is scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a stream id from arbitrary labels (user ids, item ids, ...).
pub fn stream_id(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Stream `index` of a generator keyed by `(seed, label)`; used for per-trial
/// and per-user randomness.
pub fn labeled(seed: u64, label: &[u8], index: u64) -> StreamRng {
    stream(stream_id(&[&seed.to_le_bytes(), label]), index)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Uniform draw from the probability simplex (normalized exponentials).
pub fn simplex<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}
