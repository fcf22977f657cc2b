//! Shared fixtures for the criterion benchmarks: a small deterministic
//! scene and model builders, so every bench measures the same workload.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rspk_core::data::AnnotatedSample;
use rspk_core::model::{Model, ModelConfig, ModelKind};
use rspk_core::synth::{make_synthetic, SceneSpec};

/// One 128×128 image with five instances (the desk-scale shape).
pub fn demo_scene() -> AnnotatedSample {
    let spec = SceneSpec { n_images: 1, ..Default::default() };
    make_synthetic(&spec, 42).pop().expect("one image")
}

/// A batch of small scenes for evaluator benchmarks.
pub fn demo_scenes(n: usize) -> Vec<AnnotatedSample> {
    let spec = SceneSpec { n_images: n, ..Default::default() };
    make_synthetic(&spec, 42)
}

pub fn demo_model(kind: ModelKind) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model =
        Model::new(ModelConfig::with_kind(kind), 3, &mut rng).expect("model builds");
    model.trained = true;
    model
}
