//! DCGAN-style transposed-convolution generator.
//!
//! A linear projection maps the latent input to a `base * 2^(stages-1)`
//! channel 4x4 map; each stage doubles the resolution with a stride-2
//! transposed convolution; a final 3x3 convolution emits the image through
//! tanh, so pixels live in `[-1, 1]`.
//!
//! No normalization layers: inference is then independent of batch
//! composition, and reconstruction outputs are deterministic.

use super::layers::{Conv2d, ConvTranspose2d, Linear};
use super::Mounted;
use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Width of the generator input: code dimension plus noise dimension.
    pub input_dim: usize,
    /// Base channel count of the last upsampling stage.
    pub base_channels: usize,
    /// Output resolution; must be `4 * 2^k` for some `k >= 1`.
    pub out_size: usize,
    pub out_channels: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.base_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator dims must be positive".into()));
        }
        let mut s = self.out_size;
        while s > 4 && s % 2 == 0 {
            s /= 2;
        }
        if s != 4 || self.out_size < 8 {
            return Err(Error::Config(format!(
                "generator out_size {} must be 4 * 2^k with k >= 1",
                self.out_size
            )));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        (self.out_size / 4).trailing_zeros() as usize
    }
}

/// Generator parameters plus the input/output shape contract.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    config: GeneratorConfig,
    project: Linear,
    ups: Vec<ConvTranspose2d>,
    to_image: Conv2d,
}

impl GeneratorState {
    /// DCGAN-convention init: all conv weights from N(0, 0.02).
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Stream::new(seed, "gen-init");
        let stages = config.stages();
        let top = config.base_channels << (stages - 1);
        let project = Linear::gaussian_init(config.input_dim, top * 4 * 4, 0.02, &mut s);
        let mut ups = Vec::with_capacity(stages);
        for i in 0..stages {
            let cin = config.base_channels << (stages - 1 - i);
            let cout = if i + 1 < stages {
                config.base_channels << (stages - 2 - i)
            } else {
                config.base_channels
            };
            ups.push(ConvTranspose2d::gaussian_init(cin, cout, 4, 2, 1, 0.02, &mut s));
        }
        let to_image = Conv2d::gaussian_init(
            config.base_channels,
            config.out_channels,
            3,
            1,
            1,
            0.02,
            &mut s,
        );
        Ok(GeneratorState { config, project, ups, to_image })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// `(channels, H, W)` of every generated image.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        (self.config.out_channels, self.config.out_size, self.config.out_size)
    }

    /// Differentiable forward: `inputs` is a `(N, input_dim)` tape node,
    /// the result a `(N, C, H, W)` node.
    pub fn forward(&self, tape: &mut Tape, inputs: Var, mounted: &mut Mounted) -> Result<Var> {
        let got = tape.shape(inputs).to_vec();
        if got.len() != 2 || got[1] != self.config.input_dim {
            return Err(Error::Shape(format!(
                "generator expects (N, {}), got {:?}",
                self.config.input_dim, got
            )));
        }
        let n = got[0];
        let stages = self.config.stages();
        let top = self.config.base_channels << (stages - 1);
        let mut h = self.project.forward(tape, inputs, mounted)?;
        h = tape.reshape(h, &[n, top, 4, 4])?;
        h = tape.relu(h);
        for up in &self.ups {
            h = up.forward(tape, h, mounted)?;
            h = tape.relu(h);
        }
        let img = self.to_image.forward(tape, h, mounted)?;
        Ok(tape.tanh(img))
    }

    /// Inference-only batch generation from plain input rows.
    pub fn generate(&self, inputs: &[Vec<f32>]) -> Result<Arr> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty generator batch".into()));
        }
        if let Some(bad) = inputs.iter().find(|v| v.len() != self.config.input_dim) {
            return Err(Error::Shape(format!(
                "generator input of length {} (expected {})",
                bad.len(),
                self.config.input_dim
            )));
        }
        let n = inputs.len();
        let flat: Vec<f32> = inputs.iter().flatten().copied().collect();
        let batch = ArrayD::from_shape_vec(IxDyn(&[n, self.config.input_dim]), flat).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let mut mounted = Mounted::new();
        let out = self.forward(&mut tape, x, &mut mounted)?;
        Ok(tape.value(out).clone())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut out = self.project.params_mut();
        for up in &mut self.ups {
            out.extend(up.params_mut());
        }
        out.extend(self.to_image.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        let mut this = self.clone();
        this.params_mut().iter().map(|p| p.len()).sum()
    }
}
