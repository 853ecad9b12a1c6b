//! Deterministic random streams.
//!
//! Every source of randomness is a ChaCha8 stream keyed by a base seed plus
//! up to three tag words. Reconstructing a stream from the same key replays
//! the same sequence bit for bit, which is what lets the SPSA perturbation
//! be regenerated at each of its three uses instead of stored.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Tensor;

/// Named substream domains hanging off one run seed.
pub mod domain {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SPSA: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const METRIC: u64 = 6;
}

/// Builds the stream keyed by `(base_seed, tags...)`; at most three tags.
pub fn substream(base_seed: u64, tags: &[u64]) -> ChaCha8Rng {
    assert!(tags.len() <= 3, "at most three tag words");
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&base_seed.to_le_bytes());
    for (i, t) in tags.iter().enumerate() {
        key[8 + 8 * i..16 + 8 * i].copy_from_slice(&t.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in `[0, 1)` from the top 53 bits of one `u64`.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, bound)`.
pub fn uniform_index(rng: &mut ChaCha8Rng, bound: usize) -> usize {
    debug_assert!(bound > 0);
    (rng.next_u64() % bound as u64) as usize
}

/// Standard-normal stream over a ChaCha8 source (Box-Muller, pair-cached).
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(rng: ChaCha8Rng) -> Self {
        NormalStream { rng, spare: None }
    }

    /// Stream keyed by `(base_seed, tags...)`; same key, same sequence.
    pub fn keyed(base_seed: u64, tags: &[u64]) -> Self {
        NormalStream::new(substream(base_seed, tags))
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1]: shift away from zero so ln is finite.
        let u1 = 1.0 - uniform(&mut self.rng);
        let u2 = uniform(&mut self.rng);
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Seeded permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}

/// Tensor with iid `N(0, sigma²)` entries.
pub fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut stream = NormalStream::new(rng.clone());
    let values: Vec<f64> = (0..n).map(|_| stream.next() * sigma).collect();
    // Advance the caller's stream past what we consumed.
    *rng = stream.rng;
    Tensor::new(shape, values).expect("shape/length agree by construction")
}
