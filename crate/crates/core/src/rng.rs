//! Deterministic random streams.
//!
//! Every random choice in the crate is drawn from a [`SeededRng`]. The stream
//! is ChaCha8 keyed from a 64-bit seed, which is value-stable across
//! platforms. Parallel work never shares a stream; each task derives a child
//! seed from the master seed and a path of task indices.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Identifier of the generator family, stored in key file headers.
pub const PRNG_CHACHA8: u8 = 1;

/// Domain tags for child seeds so that independent uses of one master seed
/// never collide.
pub mod stream {
    pub const PERMUTATION: u64 = 0x5045_524d;
    pub const MATRIX: u64 = 0x4d41_5458;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const CIPHER_KEY: u64 = 0x4145_534b;
    pub const SALT_PEPPER: u64 = 0x5341_4c54;
    pub const MIXUP: u64 = 0x4d49_5855;
    pub const LABELS: u64 = 0x4c41_4245;
    pub const SAMPLE: u64 = 0x5341_4d50;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn child(master: u64, path: &[u64]) -> Self {
        Self::new(derive_seed(master, path))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform real in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn fill_bytes(&mut self, buf: &mut [u8]) {
        self.inner.fill_bytes(buf);
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
