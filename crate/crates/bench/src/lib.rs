//! Shared fixtures for the criterion benches.

use laneseg_core::config::ExperimentConfig;
use laneseg_core::dataset::{generate_scene, GenParams, ScenarioKind, Scene};
use laneseg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)` from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Uniform values in `[0, 1)`, e.g. normalized sampling locations.
pub fn random_unit(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.0..1.0))
}

/// A default-size intersection scene with `frames` frames.
pub fn scene(frames: usize) -> Scene {
    let params = GenParams {
        frames,
        ..GenParams::default()
    };
    generate_scene(1, ScenarioKind::Intersection, &params)
}

pub fn preset(name: &str) -> ExperimentConfig {
    ExperimentConfig::preset(name).expect("known preset")
}
