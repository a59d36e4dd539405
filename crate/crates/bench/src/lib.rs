//! Shared fixtures for the criterion benches in `benches/`.

use lrpabn::encoder::FeatureMap;
use lrpabn::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random non-negative (query, class) feature-map pair.
pub fn feature_pair(channels: usize, positions: usize, seed: u64) -> (FeatureMap, FeatureMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = || FeatureMap::from_array(Array2::from_shape_fn((channels, positions), |_| rng.random_range(0.0..1.0)));
    (map(), map())
}

/// A random `[3, size, size]` image in `[0, 1]`.
pub fn image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, size, size], |_| rng.random())
}
