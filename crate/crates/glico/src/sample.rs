//! Class-conditional synthetic images from a trained state, and the
//! stochastic batch-replacement augmentation policy.
//!
//! A synthetic sample for index `i` interpolates `z_i` toward the code of a
//! uniformly drawn same-class partner (factor drawn from a small set near
//! `i`), concatenates fresh noise, and decodes through the generator. The
//! augmentation policy independently replaces each batch slot with such a
//! sample with probability `replace_prob`, keeping the label.

use crate::error::{Error, Result};
use crate::latent::{lerp, slerp, LatentCode, NoiseSpec};
use crate::rng::Stream;
use crate::train::TrainState;
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Interpolation rule between same-class codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterpKind {
    #[default]
    Slerp,
    Lerp,
}

/// Stochastic replacement policy for classifier training batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub replace_prob: f64,
    /// Interpolation factors, drawn uniformly per sample.
    pub t_set: Vec<f32>,
    pub interp: InterpKind,
    pub noise: NoiseSpec,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            replace_prob: 0.5,
            t_set: vec![0.1, 0.2, 0.3, 0.4],
            interp: InterpKind::Slerp,
            noise: NoiseSpec::default(),
        }
    }
}

impl AugmentationPolicy {
    /// Production policies keep `t` strictly inside (0, 1); `t = 0` is
    /// tolerated so reconstruction-equivalence tests can pin the
    /// interpolation path.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::Config(format!(
                "replace_prob {} outside [0, 1]",
                self.replace_prob
            )));
        }
        if self.t_set.is_empty() {
            return Err(Error::Config("t_set must be nonempty".into()));
        }
        if self.t_set.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::Config(format!(
                "interpolation factors {:?} must lie in [0, 1)",
                self.t_set
            )));
        }
        Ok(())
    }
}

/// Where a synthetic image came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: usize,
    pub partner: usize,
    pub t: f32,
    /// Seed of the per-image noise stream; replaying it reproduces the
    /// image exactly.
    pub noise_seed: u64,
}

/// A batch of generated images with labels and per-image provenance.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

fn interpolate(
    kind: InterpKind,
    a: &LatentCode,
    b: &LatentCode,
    t: f32,
) -> Result<LatentCode> {
    match kind {
        InterpKind::Slerp => slerp(a, b, t),
        InterpKind::Lerp => lerp(a, b, t),
    }
}

/// Generator input for a code under the trained state's noise convention:
/// concatenated noise by default, added-then-reprojected in additive mode.
fn generator_input(
    state: &TrainState,
    code: &LatentCode,
    noise: &NoiseSpec,
    noise_seed: u64,
) -> Result<Vec<f32>> {
    let mut eps = Stream::new(noise_seed, "sample-eps");
    if state.config.additive_noise {
        if noise.sigma == 0.0 {
            return Ok(code.values().to_vec());
        }
        let perturbed: Vec<f32> = code
            .values()
            .iter()
            .map(|v| v + eps.next_gaussian() * noise.sigma)
            .collect();
        Ok(crate::latent::project_to_sphere(&perturbed)?.values().to_vec())
    } else {
        Ok(crate::latent::make_generator_input(code, noise, &mut eps))
    }
}

/// The interpolated code a provenance record describes. Deterministic, so
/// tests and audits can rebuild exactly what was fed to the generator.
pub fn provenance_code(state: &TrainState, p: &Provenance, kind: InterpKind) -> Result<LatentCode> {
    let a = state.codebook.code(p.source)?;
    if p.partner == p.source {
        return Ok(a);
    }
    let b = state.codebook.code(p.partner)?;
    interpolate(kind, &a, &b, p.t)
}

/// One synthetic image for training index `i`: same-class partner, factor
/// from the policy's `t_set`, fresh noise. Degenerate interpolation pairs
/// are retried up to 5 times, then the sample falls back to a plain
/// reconstruction of `i`.
pub fn sample_synthetic(
    state: &TrainState,
    i: usize,
    policy: &AugmentationPolicy,
    rng: &mut Stream,
) -> Result<(Array3<f32>, Provenance)> {
    policy.validate()?;
    let label = state
        .codebook
        .label(i)?
        .ok_or_else(|| Error::InvalidArgument(format!("index {i} is unlabeled")))?;
    let source = state.codebook.code(i)?;

    let mut chosen: Option<(LatentCode, usize, f32)> = None;
    for _attempt in 0..5 {
        let partner = state.codebook.pick_class_partner(i, rng)?;
        let t = policy.t_set[rng.next_index(policy.t_set.len())];
        if partner == i {
            chosen = Some((source.clone(), i, 0.0));
            break;
        }
        let partner_code = state.codebook.code(partner)?;
        match interpolate(policy.interp, &source, &partner_code, t) {
            Ok(code) => {
                chosen = Some((code, partner, t));
                break;
            }
            Err(Error::DegeneratePair(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    // All attempts degenerate: emit the reconstruction of i.
    let (code, partner, t) = chosen.unwrap_or((source, i, 0.0));

    let noise_seed = rng.next_u64();
    let input = generator_input(state, &code, &policy.noise, noise_seed)?;
    let images = state.generator.generate(&[input])?;
    let image = images
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("generator emits (N, C, H, W)");
    let _ = label;
    Ok((image, Provenance { source: i, partner, t, noise_seed }))
}

/// Replaces each slot of a real batch with a synthetic sample with
/// probability `replace_prob`. Labels and batch size are preserved;
/// `provenance[k]` is `Some` exactly for replaced slots.
pub fn augment_batch(
    state: &TrainState,
    images: &Array4<f32>,
    labels: &[usize],
    indices: &[usize],
    policy: &AugmentationPolicy,
    rng: &mut Stream,
) -> Result<(Array4<f32>, Vec<usize>, Vec<Option<Provenance>>)> {
    policy.validate()?;
    let n = images.dim().0;
    if labels.len() != n || indices.len() != n {
        return Err(Error::Shape(format!(
            "batch of {n} images with {} labels and {} indices",
            labels.len(),
            indices.len()
        )));
    }
    let mut out = images.clone();
    let mut provenance = vec![None; n];
    for k in 0..n {
        if rng.next_uniform() < policy.replace_prob {
            let (img, p) = sample_synthetic(state, indices[k], policy, rng)?;
            out.index_axis_mut(Axis(0), k).assign(&img);
            provenance[k] = Some(p);
        }
    }
    Ok((out, labels.to_vec(), provenance))
}

/// Deterministic reconstruction of training index `i`: the noise block is
/// zeroed, so repeated calls return identical images.
pub fn reconstruct(state: &TrainState, i: usize) -> Result<Array3<f32>> {
    let code = state.codebook.code(i)?;
    let input = if state.config.additive_noise {
        code.values().to_vec()
    } else {
        let mut v = code.values().to_vec();
        v.extend(std::iter::repeat_n(0.0f32, state.config.noise.noise_dim));
        v
    };
    let images = state.generator.generate(&[input])?;
    Ok(images
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("generator emits (N, C, H, W)"))
}

/// Reconstruction sweep from `i` to `j`: `steps` interior interpolation
/// points plus both endpoints, all with zeroed noise.
pub fn interpolation_strip(
    state: &TrainState,
    i: usize,
    j: usize,
    steps: usize,
) -> Result<Vec<Array3<f32>>> {
    let a = state.codebook.code(i)?;
    let b = state.codebook.code(j)?;
    let mut out = Vec::with_capacity(steps + 2);
    for k in 0..steps + 2 {
        let t = k as f32 / (steps + 1) as f32;
        let code = if k == 0 {
            a.clone()
        } else if k == steps + 1 {
            b.clone()
        } else {
            slerp(&a, &b, t)?
        };
        let input = if state.config.additive_noise {
            code.values().to_vec()
        } else {
            let mut v = code.values().to_vec();
            v.extend(std::iter::repeat_n(0.0f32, state.config.noise.noise_dim));
            v
        };
        let images = state.generator.generate(&[input])?;
        out.push(
            images
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("generator emits (N, C, H, W)"),
        );
    }
    Ok(out)
}

/// Writes a row-major grid of `[-1, 1]` images as one PNG.
pub fn save_grid(images: &[Array3<f32>], cols: usize, path: &Path) -> Result<()> {
    if images.is_empty() || cols == 0 {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    let (c, h, w) = images[0].dim();
    if c != 3 {
        return Err(Error::Shape(format!("grid expects 3-channel images, got {c}")));
    }
    if images.iter().any(|img| img.dim() != (c, h, w)) {
        return Err(Error::Shape("grid images must share one shape".into()));
    }
    let rows = images.len().div_ceil(cols);
    let mut canvas = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for (k, img) in images.iter().enumerate() {
        let (gy, gx) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                let px: [u8; 3] = std::array::from_fn(|ch| {
                    ((img[[ch, y, x]].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                });
                canvas.put_pixel((gx * w + x) as u32, (gy * h + y) as u32, image::Rgb(px));
            }
        }
    }
    canvas
        .save(path)
        .map_err(|e| Error::InvalidArgument(format!("writing {}: {e}", path.display())))?;
    Ok(())
}
