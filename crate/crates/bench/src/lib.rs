//! Shared input builders for the scan and block benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xyscan_core::tensor::Tensor;

pub fn random_coeffs(len: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (a, b)
}

pub fn random_feature_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, h, w, c], |_| rng.gen_range(-1.0..1.0))
}
