//! Fixtures shared by the criterion benchmarks in `benches/`.

use apex_core::synth::{generate, SynthConfig, SynthDataset};
use apex_core::{DisentangleConfig, Matrix, Scheme, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense `d × d` matrix with entries uniform in `[-scale, scale)`.
pub fn random_matrix(d: usize, scale: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(d, d, |_, _| rng.random_range(-scale..scale))
}

pub fn random_map(f: usize, t: usize, d: usize, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_fn(f, t, d, |_, _, _| rng.random_range(-1.0..1.0))
}

/// The default synthetic benchmark at `n` samples.
pub fn dataset(n: usize) -> SynthDataset {
    generate(&SynthConfig {
        num_samples: n,
        ..Default::default()
    })
    .expect("synthetic benchmark")
}

/// Default schedule with a desk-scale step size.
pub fn desk_config(scheme: Scheme) -> DisentangleConfig {
    DisentangleConfig {
        lr: 2e-2,
        batch_size: 32,
        ..DisentangleConfig::with_scheme(scheme)
    }
}
