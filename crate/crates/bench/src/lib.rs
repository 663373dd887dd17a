//! Shared fixtures for the benchmarks.

use mpdoc_core::autograd::AttentionPattern;
use mpdoc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// One segment of length `s` with CLS global.
pub fn windowed_pattern(s: usize, window: usize, heads: usize) -> AttentionPattern {
    let mask = vec![true; s];
    let mut global = vec![false; s];
    global[0] = true;
    AttentionPattern::sliding_window(heads, &[(0, s)], &mask, &global, window).expect("valid pattern")
}

pub fn dense_pattern(s: usize, heads: usize) -> AttentionPattern {
    AttentionPattern::dense(heads, &[(0, s)], &vec![true; s]).expect("valid pattern")
}
