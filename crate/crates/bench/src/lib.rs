//! Shared inputs for the benchmarks: desk-scale shapes, fixed seeds.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsealloc::data::{generate_synthetic, SyntheticSpec};
use sparsealloc::model::{encode, preprocess};
use sparsealloc::{AffinityMatrix, SaeParams};

pub const D_MODEL: usize = 64;
pub const FEATURES: usize = 512;
pub const BATCH: usize = 1536;
pub const EXPECTED_K: f64 = 20.0;

/// One preprocessed batch of synthetic activations.
pub fn batch() -> Array2<f64> {
    let spec = SyntheticSpec {
        n_tokens: BATCH,
        ..SyntheticSpec::default()
    };
    let (store, _) = generate_synthetic(&spec).expect("default spec is valid");
    let rows: Vec<usize> = (0..BATCH).collect();
    preprocess(store.gather(&rows).view()).expect("synthetic rows are not constant")
}

pub fn params() -> SaeParams {
    SaeParams::init(D_MODEL, FEATURES, &mut ChaCha8Rng::seed_from_u64(0))
}

pub fn affinities(x: &Array2<f64>, params: &SaeParams) -> AffinityMatrix {
    encode(params, x.view()).expect("finite inputs")
}

/// Descending Zipf densities with mild multiplicative noise.
pub fn noisy_densities(features: usize, alpha: f64, beta: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (1..=features)
        .map(|r| 0.5 / (r as f64 + beta).powf(alpha) * rng.random_range(0.9..1.1))
        .collect()
}
