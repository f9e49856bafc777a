//! Shared fixtures for the benchmarks.

use aam_cgd::dataset::AnnotatedImage;
use aam_cgd::model::AamBundle;
use aam_cgd::shape::Components;
use aam_cgd::synthesis::{procedural_corpus, synthesize_dataset, ProceduralSpec, SynthOptions};
use aam_cgd::training::{train, TrainConfig};

/// A bundle trained on the built-in generator and a few test images
/// rendered from it.
pub fn fixture(face_size: f64, test_images: usize) -> (AamBundle, Vec<AnnotatedImage>) {
    let spec = ProceduralSpec {
        face_size,
        ..ProceduralSpec::default()
    };
    let opts = SynthOptions {
        rotation: 0.2,
        scale_jitter: 0.1,
        ..SynthOptions::default()
    };
    let corpus = procedural_corpus(&spec, 30, &opts, 1).expect("corpus");
    let config = TrainConfig {
        face_size,
        appearance_components: Components::VarianceRatio(0.98),
        ..TrainConfig::default()
    };
    let (bundle, _) = train(&corpus, &config).expect("training");
    let test = synthesize_dataset(&bundle, test_images, &SynthOptions::default(), 7).expect("synthesis");
    (bundle, test)
}
