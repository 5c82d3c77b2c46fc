//! Shared fixtures: a 20-image two-class set with a tiny generator and a
//! reduced extractor, small enough to overfit in seconds on one core.

use glico::data::{synthetic, Dataset};
use glico::latent::{LatentCodebook, NoiseSpec};
use glico::loss::LossSpec;
use glico::models::{
    ClassifierArch, ClassifierConfig, ClassifierState, ExtractorConfig, ExtractorInput,
    FeatureExtractor, GeneratorConfig, GeneratorState,
};
use glico::train::{ExtractorSource, TrainConfig, TrainState};
use ndarray::Array4;

pub const FIXTURE_DIM: usize = 16;
pub const FIXTURE_NOISE: usize = 4;

pub fn fixture_dataset() -> Dataset {
    synthetic::gratings("fixture", 2, 10, 4, 8, 77)
}

pub fn fixture_extractor_config() -> ExtractorConfig {
    ExtractorConfig {
        base_width: 4,
        blocks: 3,
        in_channels: 3,
        input: ExtractorInput::Native,
    }
}

pub fn fixture_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        code_lr: 1e-2,
        gen_lr: 1e-3,
        cls_lr: 1e-3,
        optimizer_id: "adam".into(),
        batch_size: 10,
        noise: NoiseSpec::new(FIXTURE_NOISE, 0.1).unwrap(),
        oversample_factor: 1,
        transductive: false,
        additive_noise: false,
        seed,
        checkpoint_every: 0,
    }
}

/// Builds a fixture trainer over the 20-image set. `gamma` weights the
/// classification term; `with_classifier = false` detaches the classifier
/// entirely.
pub fn fixture_state(seed: u64, epochs: usize, gamma: f32, with_classifier: bool) -> (TrainState, Array4<f32>) {
    let ds = fixture_dataset();
    let mut codebook = LatentCodebook::init_random(20, FIXTURE_DIM, seed).unwrap();
    codebook
        .set_labels(ds.train_labels.iter().map(|&l| Some(l)).collect())
        .unwrap();
    let generator = GeneratorState::new(
        GeneratorConfig {
            input_dim: FIXTURE_DIM + FIXTURE_NOISE,
            base_channels: 8,
            out_size: 8,
            out_channels: 3,
        },
        seed,
    )
    .unwrap();
    let classifier = with_classifier.then(|| {
        ClassifierState::new(
            ClassifierConfig {
                arch: ClassifierArch::SmallCnn4Conv,
                num_classes: 2,
                in_channels: 3,
                width: 8,
            },
            seed,
        )
        .unwrap()
    });
    let fe_config = fixture_extractor_config();
    let extractor = FeatureExtractor::seeded(fe_config, 11).unwrap();
    let source = ExtractorSource::Seeded { seed: 11, config: fe_config };
    let spec = LossSpec {
        layer_weights: vec![1.0 / 3.0; 3],
        gamma,
        variant: glico::loss::LossVariant::Standard,
    };
    let state = TrainState::new(
        codebook,
        generator,
        classifier,
        None,
        extractor,
        source,
        spec,
        fixture_config(seed, epochs),
    )
    .unwrap();
    (state, ds.train_images.clone())
}
