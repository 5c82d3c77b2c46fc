//! Parameterized layers. Each `forward` mounts its parameters on the tape
//! and records the handles so the trainer can pair gradients with the
//! owning arrays.

use super::Mounted;
use crate::autodiff::{Arr, Tape, Var};
use crate::error::Result;
use crate::rng::Stream;
use ndarray::{ArrayD, IxDyn};

fn gaussian(shape: &[usize], std: f32, s: &mut Stream) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| s.next_gaussian() * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Kaiming-normal std for ReLU fan-in.
fn he_std(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

/// Fully connected layer, weight stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Arr,
    pub b: Arr,
}

impl Linear {
    pub fn he(inp: usize, out: usize, s: &mut Stream) -> Self {
        Linear {
            w: gaussian(&[inp, out], he_std(inp), s),
            b: ArrayD::zeros(IxDyn(&[out])),
        }
    }

    pub fn gaussian_init(inp: usize, out: usize, std: f32, s: &mut Stream) -> Self {
        Linear {
            w: gaussian(&[inp, out], std, s),
            b: ArrayD::zeros(IxDyn(&[out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mounted: &mut Mounted) -> Result<Var> {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        mounted.vars.push(w);
        mounted.vars.push(b);
        let y = tape.matmul(x, w)?;
        tape.add_bias_rows(y, b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        vec![&mut self.w, &mut self.b]
    }
}

/// 2D convolution, weight `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Arr,
    pub b: Arr,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn he(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, s: &mut Stream) -> Self {
        Conv2d {
            w: gaussian(&[cout, cin, k, k], he_std(cin * k * k), s),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride,
            pad,
        }
    }

    pub fn gaussian_init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f32,
        s: &mut Stream,
    ) -> Self {
        Conv2d {
            w: gaussian(&[cout, cin, k, k], std, s),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mounted: &mut Mounted) -> Result<Var> {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        mounted.vars.push(w);
        mounted.vars.push(b);
        let y = tape.conv2d(x, w, self.stride, self.pad, false)?;
        tape.add_bias_channels(y, b)
    }

    /// Forward with frozen parameters: gradients flow through the op but
    /// the weight gradient is never materialized.
    pub fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        let y = tape.conv2d(x, w, self.stride, self.pad, true)?;
        tape.add_bias_channels(y, b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Transposed 2D convolution, weight `(in, out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Arr,
    pub b: Arr,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn gaussian_init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f32,
        s: &mut Stream,
    ) -> Self {
        ConvTranspose2d {
            w: gaussian(&[cin, cout, k, k], std, s),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mounted: &mut Mounted) -> Result<Var> {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        mounted.vars.push(w);
        mounted.vars.push(b);
        let y = tape.conv_transpose2d(x, w, self.stride, self.pad, false)?;
        tape.add_bias_channels(y, b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Batch normalization with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Arr,
    pub beta: Arr,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: ArrayD::ones(IxDyn(&[channels])),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mounted: &mut Mounted,
        training: bool,
    ) -> Result<Var> {
        if training {
            let g = tape.leaf(self.gamma.clone());
            let b = tape.leaf(self.beta.clone());
            mounted.vars.push(g);
            mounted.vars.push(b);
            let (y, mean, var) = tape.batch_norm(x, g, b, self.eps)?;
            for c in 0..mean.len() {
                self.running_mean[c] =
                    (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] =
                    (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
            }
            Ok(y)
        } else {
            // Inference: fold running stats and affine params into one
            // per-channel scale/shift. Parameters are not mounted; eval
            // passes never update them.
            let c = self.running_mean.len();
            let mut scale = vec![0.0f32; c];
            let mut shift = vec![0.0f32; c];
            for j in 0..c {
                let inv = 1.0 / (self.running_var[j] + self.eps).sqrt();
                scale[j] = self.gamma[[j]] * inv;
                shift[j] = self.beta[[j]] - self.running_mean[j] * scale[j];
            }
            tape.channel_affine(x, scale, shift)
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
