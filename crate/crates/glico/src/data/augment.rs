//! Standard image augmentation: horizontal flip plus random crop.
//!
//! Small images are zero-padded and re-cropped at native resolution;
//! high-resolution images are resized so the short side hits a target, then
//! randomly cropped.

use crate::error::{Error, Result};
use crate::rng::Stream;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Crop geometry of the standard augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum AugmentSpec {
    /// Pad by `pad` on every side, crop back to the original size.
    PadCrop { pad: usize },
    /// Resize the short side to `resize`, crop `crop x crop`.
    ResizeCrop { resize: usize, crop: usize },
}

impl AugmentSpec {
    /// The conventional choice per resolution: pad-4 recrop for small
    /// images, resize-256 crop-224 for high-resolution sets.
    pub fn for_resolution(height: usize) -> Self {
        if height <= 64 {
            AugmentSpec::PadCrop { pad: 4 }
        } else {
            AugmentSpec::ResizeCrop { resize: 256, crop: 224 }
        }
    }

    /// Output spatial size given an input height/width.
    pub fn output_size(&self, input: usize) -> usize {
        match self {
            AugmentSpec::PadCrop { .. } => input,
            AugmentSpec::ResizeCrop { crop, .. } => *crop,
        }
    }
}

/// Mirrors the image around its vertical axis. An involution.
pub fn horizontal_flip(image: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = image[[ch, y, w - 1 - x]];
            }
        }
    }
    out
}

/// Plain (non-differentiable) bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, oh, ow));
    let axis = |dst: usize, out_len: usize, in_len: usize| -> (usize, usize, f32) {
        let scale = in_len as f32 / out_len as f32;
        let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, src - i0 as f32)
    };
    for oy in 0..oh {
        let (y0, y1, wy) = axis(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, wx) = axis(ox, ow, w);
            for ch in 0..c {
                out[[ch, oy, ox]] = (1.0 - wy) * (1.0 - wx) * image[[ch, y0, x0]]
                    + (1.0 - wy) * wx * image[[ch, y0, x1]]
                    + wy * (1.0 - wx) * image[[ch, y1, x0]]
                    + wy * wx * image[[ch, y1, x1]];
            }
        }
    }
    out
}

fn pad_crop(image: &Array3<f32>, pad: usize, oy: usize, ox: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[[ch, y, x]] = image[[ch, sy as usize, sx as usize]];
                }
            }
        }
    }
    out
}

/// Horizontal flip with probability 0.5, then the configured crop.
pub fn standard_augment(
    image: &Array3<f32>,
    spec: &AugmentSpec,
    rng: &mut Stream,
) -> Result<Array3<f32>> {
    let flipped = if rng.next_uniform() < 0.5 {
        horizontal_flip(image)
    } else {
        image.clone()
    };
    match spec {
        AugmentSpec::PadCrop { pad } => {
            let oy = rng.next_index(2 * pad + 1);
            let ox = rng.next_index(2 * pad + 1);
            Ok(pad_crop(&flipped, *pad, oy, ox))
        }
        AugmentSpec::ResizeCrop { resize, crop } => {
            let (_, h, w) = flipped.dim();
            if *crop > *resize {
                return Err(Error::Config(format!(
                    "crop {crop} larger than resize target {resize}"
                )));
            }
            let (short, _) = (h.min(w), h.max(w));
            let scale = *resize as f32 / short as f32;
            let (nh, nw) = (
                (h as f32 * scale).round() as usize,
                (w as f32 * scale).round() as usize,
            );
            let resized = resize_bilinear(&flipped, nh.max(*resize), nw.max(*resize));
            let (_, rh, rw) = resized.dim();
            let oy = rng.next_index(rh - crop + 1);
            let ox = rng.next_index(rw - crop + 1);
            let mut out = Array3::zeros((flipped.dim().0, *crop, *crop));
            for ch in 0..flipped.dim().0 {
                for y in 0..*crop {
                    for x in 0..*crop {
                        out[[ch, y, x]] = resized[[ch, y + oy, x + ox]];
                    }
                }
            }
            Ok(out)
        }
    }
}
