//! Shared fixtures for the benchmark suite.

use gridvlm_core::encoders::{EncoderConfig, EncoderTrunk};
use gridvlm_core::fusion::{FusionModel, ModelConfig};
use gridvlm_core::rope::PeScheme;
use gridvlm_core::scenegen::{sample_scene, SceneConstraints, SceneSpec, Vocab};
use gridvlm_core::RngStream;

pub fn bench_scene() -> SceneSpec {
    let mut rng = RngStream::new(1234, 0);
    sample_scene(&mut rng, (8, 8), &SceneConstraints::default()).unwrap()
}

pub fn bench_vocab() -> Vocab {
    Vocab::for_grid(8, 8)
}

pub fn bench_trunk() -> EncoderTrunk<f32> {
    let mut rng = RngStream::new(1234, 1);
    EncoderTrunk::init(EncoderConfig::default(), &mut rng).unwrap()
}

pub fn bench_model(pe: PeScheme) -> FusionModel<f32> {
    let mut rng = RngStream::new(1234, 2);
    let trunk = bench_trunk();
    FusionModel::init(ModelConfig::default(), pe, bench_vocab().len(), trunk, &mut rng).unwrap()
}
