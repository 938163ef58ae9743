//! Shared fixtures for the benchmarks.

use andnet_core::dataset::NUM_CLASSES;
use andnet_core::network::DEFAULT_LAYER_SIZES;
use andnet_core::{InputFilter, LabeledSet, Matrix, NetworkParams, RngStream};

/// Matrix with entries uniform in `[0, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed);
    let data = (0..rows * cols).map(|_| rng.uniform(0.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite values")
}

/// Synthetic MNIST-shaped set: sparse bright pixels, labels cycling 0..9.
pub fn synthetic_set(n: usize, seed: u64) -> LabeledSet {
    let mut rng = RngStream::new(seed);
    let features = DEFAULT_LAYER_SIZES[0];
    let data = (0..n * features)
        .map(|_| if rng.uniform(0.0, 1.0) < 0.2 { rng.uniform(0.5, 1.0) } else { 0.0 })
        .collect();
    let images = Matrix::from_vec(n, features, data).expect("finite values");
    let labels = (0..n).map(|i| i % NUM_CLASSES).collect();
    LabeledSet::new(images, labels).expect("valid set")
}

/// Default-architecture network.
pub fn default_network(seed: u64) -> NetworkParams {
    NetworkParams::init(&DEFAULT_LAYER_SIZES, InputFilter::default(), &mut RngStream::new(seed))
        .expect("valid sizes")
}
