//! Frozen perceptual feature extractor with VGG-16 conv topology.
//!
//! Five conv blocks of (2, 2, 3, 3, 3) layers; the reconstruction loss taps
//! the activations after the second convolution of each block. Parameters
//! are fixed at construction: gradients flow through the network to its
//! input but never update it.
//!
//! Weights come either from a seeded He initialization or from a weights
//! archive (for externally pretrained parameters); the content hash of the
//! weights identifies the extractor in checkpoints and run metadata.

use super::layers::Conv2d;
use crate::archive::Archive;
use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};
use std::path::Path;

const BLOCK_PLAN: [usize; 5] = [2, 2, 3, 3, 3];

/// How images reach the extractor's expected scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorInput {
    /// Feed images at their native resolution.
    Native,
    /// Bilinearly resize to `(size, size)` first; pretrained weights expect
    /// their training scale (224 for the standard distribution).
    Upsample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Channels of the first block; later blocks scale 2x/4x/8x/8x.
    /// 64 reproduces the full VGG-16 widths.
    pub base_width: usize,
    /// Number of conv blocks (and taps), at most 5.
    pub blocks: usize,
    pub in_channels: usize,
    pub input: ExtractorInput,
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("extractor dims must be positive".into()));
        }
        if self.blocks == 0 || self.blocks > BLOCK_PLAN.len() {
            return Err(Error::Config(format!(
                "extractor blocks must be 1..=5, got {}",
                self.blocks
            )));
        }
        if let ExtractorInput::Upsample(s) = self.input {
            if s < 8 {
                return Err(Error::Config(format!("upsample target {s} too small")));
            }
        }
        Ok(())
    }

    fn block_channels(&self, b: usize) -> usize {
        self.base_width << b.min(3)
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            base_width: 64,
            blocks: 5,
            in_channels: 3,
            input: ExtractorInput::Native,
        }
    }
}

/// The frozen network plus its identity hash.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    blocks: Vec<Vec<Conv2d>>,
    hash: String,
}

/// Tap activations of one extraction pass, outermost block first.
pub struct Taps {
    pub vars: Vec<Var>,
}

impl FeatureExtractor {
    /// Seeded random (He) parameters. Useful whenever pretrained weights
    /// are unavailable; random fixed projections still expose multi-scale
    /// image structure to the loss.
    pub fn seeded(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Stream::new(seed, "extractor-init");
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut prev = config.in_channels;
        for b in 0..config.blocks {
            let ch = config.block_channels(b);
            let mut block = Vec::with_capacity(BLOCK_PLAN[b]);
            for _ in 0..BLOCK_PLAN[b] {
                block.push(Conv2d::he(prev, ch, 3, 1, 1, &mut s));
                prev = ch;
            }
            blocks.push(block);
        }
        let mut fe = FeatureExtractor { config, blocks, hash: String::new() };
        fe.hash = fe.compute_hash();
        Ok(fe)
    }

    /// Loads weights saved by [`FeatureExtractor::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let ar = Archive::load(path)?;
        let config: ExtractorConfig = serde_json::from_str(&ar.get_str("config")?)
            .map_err(|e| Error::Integrity(format!("extractor config: {e}")))?;
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut block = Vec::with_capacity(BLOCK_PLAN[b]);
            for l in 0..BLOCK_PLAN[b] {
                let w = ar.get_f32_array(&format!("conv{b}_{l}_w"))?;
                let bias = ar.get_f32_array(&format!("conv{b}_{l}_b"))?;
                block.push(Conv2d { w, b: bias, stride: 1, pad: 1 });
            }
            blocks.push(block);
        }
        let mut fe = FeatureExtractor { config, blocks, hash: String::new() };
        fe.hash = fe.compute_hash();
        Ok(fe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        ar.put_str("config", &serde_json::to_string(&self.config).unwrap());
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, conv) in block.iter().enumerate() {
                ar.put_f32_array(&format!("conv{b}_{l}_w"), &conv.w);
                ar.put_f32_array(&format!("conv{b}_{l}_b"), &conv.b);
            }
        }
        ar.save(path)
    }

    fn compute_hash(&self) -> String {
        let mut ar = Archive::new();
        ar.put_str("config", &serde_json::to_string(&self.config).unwrap());
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, conv) in block.iter().enumerate() {
                ar.put_f32_array(&format!("conv{b}_{l}_w"), &conv.w);
                ar.put_f32_array(&format!("conv{b}_{l}_b"), &conv.b);
            }
        }
        ar.content_hash()
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Content hash identifying these weights.
    pub fn identity_hash(&self) -> &str {
        &self.hash
    }

    pub fn tap_count(&self) -> usize {
        self.config.blocks
    }

    /// Snapshot of all parameters, for the frozen-params invariant.
    pub fn weight_snapshot(&self) -> Vec<Arr> {
        self.blocks
            .iter()
            .flat_map(|b| b.iter().flat_map(|c| [c.w.clone(), c.b.clone()]))
            .collect()
    }

    /// Rescales pixels from `[-1, 1]` to the normalized input the conv
    /// stack expects, then optionally resizes.
    fn prepare(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let c = self.config.in_channels;
        // [-1,1] -> [0,1] -> standardized by the usual pretraining stats.
        let (mean, std): (Vec<f32>, Vec<f32>) = if c == 3 {
            (vec![0.485, 0.456, 0.406], vec![0.229, 0.224, 0.225])
        } else {
            (vec![0.5; c], vec![0.5; c])
        };
        let scale: Vec<f32> = std.iter().map(|s| 1.0 / (2.0 * s)).collect();
        let shift: Vec<f32> = mean.iter().zip(&std).map(|(m, s)| (0.5 - m) / s).collect();
        let x = tape.channel_affine(images, scale, shift)?;
        match self.config.input {
            ExtractorInput::Native => Ok(x),
            ExtractorInput::Upsample(size) => tape.upsample_bilinear(x, size, size),
        }
    }

    /// Runs the frozen stack, returning the per-block tap activations.
    pub fn extract(&self, tape: &mut Tape, images: Var) -> Result<Taps> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "extractor expects (N, {}, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        let mut h = self.prepare(tape, images)?;
        let mut taps = Vec::with_capacity(self.config.blocks);
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, conv) in block.iter().enumerate() {
                h = conv.forward_frozen(tape, h)?;
                h = tape.relu(h);
                if l == 1 {
                    taps.push(h);
                }
            }
            let spatial = tape.shape(h)[2];
            if b + 1 < self.config.blocks && spatial >= 2 && spatial % 2 == 0 {
                h = tape.max_pool2(h)?;
            }
        }
        Ok(Taps { vars: taps })
    }

    /// Pooled deepest-tap features `(N, C)`: the default feature source for
    /// distribution-level quality scoring.
    pub fn pooled_features(&self, images: &Arr) -> Result<Arr> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let taps = self.extract(&mut tape, x)?;
        let last = *taps.vars.last().expect("at least one tap");
        let pooled = tape.global_avg_pool(last)?;
        Ok(tape.value(pooled).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn tiny_config() -> ExtractorConfig {
        ExtractorConfig { base_width: 4, blocks: 3, in_channels: 3, input: ExtractorInput::Native }
    }

    fn batch(n: usize, hw: usize) -> Arr {
        let len = n * 3 * hw * hw;
        let data: Vec<f32> = (0..len).map(|i| ((i % 17) as f32 / 8.5) - 1.0).collect();
        ArrayD::from_shape_vec(IxDyn(&[n, 3, hw, hw]), data).unwrap()
    }

    #[test]
    fn tap_count_matches_blocks() {
        let fe = FeatureExtractor::seeded(tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(batch(2, 16));
        let taps = fe.extract(&mut tape, x).unwrap();
        assert_eq!(taps.vars.len(), 3);
        // Block spatial sizes halve: 16, 8, 4.
        assert_eq!(tape.shape(taps.vars[0]), &[2, 4, 16, 16]);
        assert_eq!(tape.shape(taps.vars[1]), &[2, 8, 8, 8]);
        assert_eq!(tape.shape(taps.vars[2]), &[2, 16, 4, 4]);
    }

    #[test]
    fn full_depth_runs_on_small_images() {
        let cfg = ExtractorConfig { base_width: 2, blocks: 5, ..Default::default() };
        let fe = FeatureExtractor::seeded(cfg, 1).unwrap();
        let feats = fe.pooled_features(&batch(1, 32)).unwrap();
        assert_eq!(feats.shape(), &[1, 16]);
    }

    #[test]
    fn upsample_mode_changes_tap_resolution() {
        let cfg = ExtractorConfig {
            base_width: 2,
            blocks: 1,
            in_channels: 3,
            input: ExtractorInput::Upsample(24),
        };
        let fe = FeatureExtractor::seeded(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(batch(1, 8));
        let taps = fe.extract(&mut tape, x).unwrap();
        assert_eq!(tape.shape(taps.vars[0]), &[1, 2, 24, 24]);
    }

    #[test]
    fn weights_roundtrip_with_stable_hash() {
        let fe = FeatureExtractor::seeded(tiny_config(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fe.bin");
        fe.save(&path).unwrap();
        let back = FeatureExtractor::load(&path).unwrap();
        assert_eq!(back.identity_hash(), fe.identity_hash());
        let a = fe.pooled_features(&batch(1, 8)).unwrap();
        let b = back.pooled_features(&batch(1, 8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_in_hash() {
        let a = FeatureExtractor::seeded(tiny_config(), 1).unwrap();
        let b = FeatureExtractor::seeded(tiny_config(), 2).unwrap();
        assert_ne!(a.identity_hash(), b.identity_hash());
    }
}
