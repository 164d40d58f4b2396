//! Fixtures shared by the benchmarks.

use seqwarp_core::model::NoiseScales;
use seqwarp_core::sim::{generate_dataset, GroundTruth, SimConfig};
use seqwarp_core::{Dataset, ModelBundle};

/// Simulated population with the default shape and `n` units.
pub fn population(n: usize, sigma: f64) -> (Dataset, GroundTruth) {
    generate_dataset(&SimConfig {
        n,
        sigma_noise: sigma,
        seed: 7,
        ..SimConfig::default()
    })
    .expect("default simulator config is valid")
}

/// Ground-truth parameters packaged as a model.
pub fn truth_bundle(gt: &GroundTruth) -> ModelBundle {
    ModelBundle {
        basis: gt.basis.clone(),
        effects: gt.effects.clone(),
        noise: NoiseScales::new(1.0, 1.0).expect("positive scales"),
    }
}
