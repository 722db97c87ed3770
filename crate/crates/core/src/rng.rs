//! Seeded generators and label-based seed derivation.
//!
//! Every stochastic consumer gets its own stream, derived from a master seed
//! and a textual label, so results do not depend on call order or on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from `master` and a label.
pub fn derive(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Derive a child seed for the `index`-th member of a labelled family.
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0xff]);
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Draw a fresh 64-bit seed from an existing generator.
pub fn fork(rng: &mut Rng) -> u64 {
    use rand::Rng as _;
    rng.random()
}

/// Standard normal draw.
pub fn normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.sample(rand_distr::StandardNormal)
}

/// Uniform draw in `[0, 1)`.
pub fn uniform(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.random::<f64>()
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut Rng, n: usize) -> usize {
    use rand::Rng as _;
    rng.random_range(0..n)
}

/// Fisher-Yates shuffle of `items`.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

/// `count` distinct indices from `0..n`, in draw order.
pub fn sample_without_replacement(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    assert!(count <= n, "cannot draw {count} distinct items from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + index(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}
