//! Seeded randomness. Every stochastic choice in the crate draws from a
//! [`SeededRng`] so that runs are bit-reproducible from their seed.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SeededRng(Xoshiro256PlusPlus);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// An independent stream derived from `seed` and a stream label.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::of(self.normal() * std)).collect();
        Tensor::new(shape, data).expect("shape product matches")
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.gen()
    }
}
