//! Procedurally generated image datasets.
//!
//! Classes are families of colored sinusoidal gratings; samples jitter the
//! phase, orientation and color and add pixel noise. The class parameters
//! vary smoothly, so interpolating between two same-class examples lands on
//! a plausible member — the regime latent-space augmentation targets.

use super::Dataset;
use crate::rng::Stream;
use ndarray::Array4;

/// Grating parameters of one class.
struct ClassSpec {
    angle: f64,
    freq: f64,
    color: [f64; 3],
    bias: f64,
}

fn class_spec(c: usize, classes: usize) -> ClassSpec {
    let golden = 0.618_033_988_749_895_f64;
    let hue = (c as f64 * golden) % 1.0;
    ClassSpec {
        angle: std::f64::consts::PI * c as f64 / classes as f64,
        freq: 1.5 + (c % 4) as f64,
        color: [
            0.55 + 0.45 * (hue * std::f64::consts::TAU).sin(),
            0.55 + 0.45 * (hue * std::f64::consts::TAU + 2.1).sin(),
            0.55 + 0.45 * (hue * std::f64::consts::TAU + 4.2).sin(),
        ],
        bias: 0.2 * ((c % 5) as f64 / 5.0 - 0.4),
    }
}

fn render(
    spec: &ClassSpec,
    size: usize,
    phase: f64,
    angle_jitter: f64,
    noise: &mut impl FnMut() -> f64,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * size * size);
    let angle = spec.angle + angle_jitter;
    let (ca, sa) = (angle.cos(), angle.sin());
    for ch in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 - 0.5;
                let v = (y as f64 + 0.5) / size as f64 - 0.5;
                let wave =
                    (std::f64::consts::TAU * spec.freq * (u * ca + v * sa) + phase).sin();
                let val = spec.color[ch] * wave + spec.bias + 0.08 * noise();
                out.push(val.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Class-conditional grating dataset with `per_class` training and
/// `test_per_class` held-out images per class.
pub fn gratings(
    id: &str,
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    size: usize,
    seed: u64,
) -> Dataset {
    let mut rng = Stream::new(seed, "synthetic-gratings");
    let mut make_half = |count: usize| {
        let n = classes * count;
        let mut images = Vec::with_capacity(n * 3 * size * size);
        let mut labels = Vec::with_capacity(n);
        for c in 0..classes {
            let spec = class_spec(c, classes);
            for _ in 0..count {
                let phase = rng.next_uniform() * std::f64::consts::TAU;
                let angle_jitter = (rng.next_uniform() - 0.5) * 0.25;
                let mut noise = || rng.next_gaussian() as f64;
                images.extend(render(&spec, size, phase, angle_jitter, &mut noise));
                labels.push(c);
            }
        }
        (
            Array4::from_shape_vec((n, 3, size, size), images).unwrap(),
            labels,
        )
    };
    let (train_images, train_labels) = make_half(per_class);
    let (test_images, test_labels) = make_half(test_per_class);
    Dataset {
        id: id.to_string(),
        classes,
        train_images,
        train_labels,
        test_images,
        test_labels,
    }
}

/// Two trivially separable classes (dark vs bright blobs); a sanity fixture
/// for classifier-training smoke tests.
pub fn two_blobs(id: &str, per_class: usize, test_per_class: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = Stream::new(seed, "synthetic-blobs");
    let mut make_half = |count: usize| {
        let n = 2 * count;
        let mut images = Vec::with_capacity(n * 3 * size * size);
        let mut labels = Vec::with_capacity(n);
        for c in 0..2 {
            let base = if c == 0 { -0.6 } else { 0.6 };
            for _ in 0..count {
                for _ch in 0..3 {
                    for _ in 0..size * size {
                        let v = base + 0.15 * rng.next_gaussian() as f64;
                        images.push(v.clamp(-1.0, 1.0) as f32);
                    }
                }
                labels.push(c);
            }
        }
        (
            Array4::from_shape_vec((n, 3, size, size), images).unwrap(),
            labels,
        )
    };
    let (train_images, train_labels) = make_half(per_class);
    let (test_images, test_labels) = make_half(test_per_class);
    Dataset {
        id: id.to_string(),
        classes: 2,
        train_images,
        train_labels,
        test_images,
        test_labels,
    }
}
