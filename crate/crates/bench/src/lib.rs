//! Shared fixtures for the benchmarks.

use resnet_ac_core::plant::sample_plant;
use resnet_ac_core::resnet::init_weights;
use resnet_ac_core::{PlantInstance, ResNetSpec, SimConfig, SimRng, WeightVector};

/// Benchmark-sized residual network, weights and input point.
pub fn fixture() -> (ResNetSpec, WeightVector, Vec<f64>) {
    let spec = SimConfig::benchmark_default().spec;
    let mut rng = SimRng::seed_from_u64(0);
    let theta = init_weights(&spec, &mut rng, -0.05, 0.05).expect("valid range");
    let x = rng.uniform_vec(spec.n(), 0.0, 2.0);
    (spec, theta, x)
}

pub fn plant() -> PlantInstance {
    sample_plant(&mut SimRng::seed_from_u64(1), 10)
}
