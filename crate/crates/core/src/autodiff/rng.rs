//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (RFC 7539 block function with 8
//! rounds, as implemented by `rand_chacha`), so draws are bit-identical
//! across platforms. Independent substreams are keyed by hashing the root
//! seed together with a purpose label: adding a new sampling site never
//! shifts the draws seen by existing ones.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Substream for `(seed, label)`.
    pub fn derive(seed: u64, label: &str) -> Self {
        RngStream::new(mix_label(seed, label))
    }

    /// Substream of this stream's root seed; does not consume draws from `self`.
    pub fn substream(&self, label: &str) -> Self {
        RngStream::derive(self.seed, label)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// FNV-1a over the label folded into the seed, finished with the SplitMix64
/// mixer.
pub fn mix_label(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Source of the two noise kinds the model consumes. Tests substitute fixed
/// noise to freeze sampling.
pub trait NoiseSource {
    /// Standard normal draws.
    fn normals(&mut self, n: usize) -> Vec<f64>;
    /// Uniform draws on (0, 1).
    fn uniforms(&mut self, n: usize) -> Vec<f64>;
}

impl NoiseSource for RngStream {
    fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    fn uniforms(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform_open()).collect()
    }
}

/// Test hook: every normal draw is `normal`, every uniform draw is `uniform`.
/// `FixedNoise::default()` gives ε = 0 and u = 0.5 (zero logistic noise).
#[derive(Clone, Copy, Debug)]
pub struct FixedNoise {
    pub normal: f64,
    pub uniform: f64,
}

impl Default for FixedNoise {
    fn default() -> Self {
        FixedNoise {
            normal: 0.0,
            uniform: 0.5,
        }
    }
}

impl NoiseSource for FixedNoise {
    fn normals(&mut self, n: usize) -> Vec<f64> {
        vec![self.normal; n]
    }

    fn uniforms(&mut self, n: usize) -> Vec<f64> {
        vec![self.uniform; n]
    }
}
