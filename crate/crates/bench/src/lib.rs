//! Fixtures shared by the benchmarks.

use fishformer_core::data::{generate_sample, DatasetManifest, SamplingMode, TrainSample};
use fishformer_core::net::FishformerConfig;

/// A deterministic procedural sample at `size` pixels.
pub fn sample(size: usize) -> TrainSample {
    let manifest = DatasetManifest::plan(1, 0, size, SamplingMode::LogUniform, 1, None).expect("valid plan");
    generate_sample(&manifest, 0, &[]).expect("sample generation")
}

/// The 64 px, 3-block toy configuration used for training experiments.
pub fn toy_model() -> FishformerConfig {
    FishformerConfig {
        image_size: 64,
        blocks: 3,
        rings: 8,
        channels: 16,
        ..Default::default()
    }
}
