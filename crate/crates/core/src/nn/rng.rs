use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Seeded ChaCha8 stream; the same seed yields the same samples on every platform.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        loop {
            let u: f64 = self.0.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.0.random_range(lo..hi)
    }

    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        Normal::new(mean, std).expect("finite std").sample(&mut self.0)
    }

    /// Standard Gumbel sample `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.open01().ln()).ln()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }
}
