//! Shared fixtures for the criterion benches.

use srcnet_core::io::Sample;
use srcnet_core::rng::SplitMix64;
use srcnet_core::sarmodel::{synthesize_scene, SceneConfig};
use srcnet_core::training::{init_models, make_batch, prepare, TrainBatch, TrainConfig};
use srcnet_core::{ModelParams, Tensor};

/// Uniform noise in [-1, 1).
pub fn noise(dims: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(dims.to_vec(), |_| (2.0 * rng.uniform() - 1.0) as f32)
}

pub struct StepFixture {
    pub config: TrainConfig,
    pub gen: ModelParams<f32>,
    pub disc: ModelParams<f32>,
    pub batch: TrainBatch<f32>,
}

/// Freshly initialized default-size models and one prepared scene.
pub fn step_fixture() -> StepFixture {
    let config = TrainConfig::default();
    let scene = synthesize_scene(&SceneConfig { seed: 1, ..SceneConfig::default() }).expect("valid scene");
    let sample = Sample {
        scene_id: "bench/scene_00000".into(),
        k_s: 1.0,
        intensity: scene.intensity,
        mask: scene.mask,
    };
    let prepared = prepare(&[sample], &config).expect("prepared scene");
    let batch = make_batch(&[&prepared[0]]).expect("batch");
    let (gen, disc) = init_models(&config).expect("models");
    StepFixture { config, gen, disc, batch }
}
