//! Differentiable models: the image generator, the auxiliary classifiers
//! and the frozen perceptual feature extractor.

mod classifier;
mod extractor;
mod generator;
mod layers;

pub use classifier::{ClassifierArch, ClassifierConfig, ClassifierState, LatentClassifier};
pub use extractor::{ExtractorConfig, ExtractorInput, FeatureExtractor};
pub use generator::{GeneratorConfig, GeneratorState};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear};

use crate::autodiff::{Arr, Grads, Tape, Var};

/// Tape handles of the parameters mounted during one forward pass, in the
/// same order as the owning model's `params_mut()`.
#[derive(Debug, Default)]
pub struct Mounted {
    pub vars: Vec<Var>,
}

impl Mounted {
    pub fn new() -> Self {
        Mounted { vars: Vec::new() }
    }

    /// Collects this pass's parameter gradients, zero-filled where a
    /// parameter did not influence the loss.
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Vec<Arr> {
        self.vars.iter().map(|v| grads.get(*v, tape)).collect()
    }
}
