//! Dataset ingestion and in-memory representation.
//!
//! Two sources are supported: a packed array file (8-bit `(n, C, H, W)`
//! images plus label vectors, wrapped in the crate's archive format) and a
//! directory of class subdirectories of PNG images with `train/` and
//! `test/` roots. Pixels are mapped to `[-1, 1]` floats on load.

mod augment;
mod split;
pub mod synthetic;

pub use augment::{horizontal_flip, resize_bilinear, standard_augment, AugmentSpec};
pub use split::{make_split, SmallSampleSplit};

use crate::archive::Archive;
use crate::error::{Error, Result};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PackedMeta {
    id: String,
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
}

/// A fully loaded dataset: train and held-out test halves.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub classes: usize,
    pub train_images: Array4<f32>,
    pub train_labels: Vec<usize>,
    pub test_images: Array4<f32>,
    pub test_labels: Vec<usize>,
}

fn u8_to_float(bytes: &[u8], n: usize, c: usize, h: usize, w: usize) -> Result<Array4<f32>> {
    if bytes.len() != n * c * h * w {
        return Err(Error::Integrity(format!(
            "image payload {} bytes, expected {}",
            bytes.len(),
            n * c * h * w
        )));
    }
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Ok(Array4::from_shape_vec((n, c, h, w), data).unwrap())
}

fn float_to_u8(images: &Array4<f32>) -> Vec<u8> {
    images
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

fn check_labels(labels: &[usize], classes: usize, what: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Integrity(format!(
            "{what}: label {bad} outside [0, {classes})"
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn resolution(&self) -> (usize, usize, usize) {
        let d = self.train_images.dim();
        (d.1, d.2, d.3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_images.dim().0 != self.train_labels.len() {
            return Err(Error::Integrity("train image/label count mismatch".into()));
        }
        if self.test_images.dim().0 != self.test_labels.len() {
            return Err(Error::Integrity("test image/label count mismatch".into()));
        }
        check_labels(&self.train_labels, self.classes, "train")?;
        check_labels(&self.test_labels, self.classes, "test")?;
        // Dense label ids: every class below `classes` appears in train.
        let mut seen = vec![false; self.classes];
        for &l in &self.train_labels {
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Integrity("train labels are not dense in [0, C)".into()));
        }
        Ok(())
    }

    /// Per-class index lists over the training half.
    pub fn class_index(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.train_labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn train_image(&self, i: usize) -> Array3<f32> {
        self.train_images.index_axis(Axis(0), i).to_owned()
    }

    /// Writes the packed array format: an archive with a JSON meta section,
    /// 8-bit image payloads and i64 label vectors.
    pub fn save_packed(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (c, h, w) = self.resolution();
        let meta = PackedMeta {
            id: self.id.clone(),
            classes: self.classes,
            channels: c,
            height: h,
            width: w,
        };
        let mut ar = Archive::new();
        ar.put_str("meta", &serde_json::to_string(&meta).unwrap());
        ar.put_u8_slice("train_images", &float_to_u8(&self.train_images));
        ar.put_i64_slice(
            "train_labels",
            &self.train_labels.iter().map(|&l| l as i64).collect::<Vec<_>>(),
        );
        ar.put_u8_slice("test_images", &float_to_u8(&self.test_images));
        ar.put_i64_slice(
            "test_labels",
            &self.test_labels.iter().map(|&l| l as i64).collect::<Vec<_>>(),
        );
        ar.save(path)
    }

    pub fn load_packed(path: &Path) -> Result<Self> {
        let ar = Archive::load(path)?;
        let meta: PackedMeta = serde_json::from_str(&ar.get_str("meta")?)
            .map_err(|e| Error::Integrity(format!("packed meta: {e}")))?;
        let train_labels: Vec<usize> = ar
            .get_i64_slice("train_labels")?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let test_labels: Vec<usize> = ar
            .get_i64_slice("test_labels")?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let train_images = u8_to_float(
            ar.get_bytes("train_images")?,
            train_labels.len(),
            meta.channels,
            meta.height,
            meta.width,
        )?;
        let test_images = u8_to_float(
            ar.get_bytes("test_images")?,
            test_labels.len(),
            meta.channels,
            meta.height,
            meta.width,
        )?;
        let ds = Dataset {
            id: meta.id,
            classes: meta.classes,
            train_images,
            train_labels,
            test_images,
            test_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Loads `root/train/<class>/*.png` and `root/test/<class>/*.png`.
    /// Class names are sorted to assign dense ids; all images must share
    /// one resolution.
    pub fn load_directory(root: &Path, id: &str) -> Result<Self> {
        let (train_images, train_labels, classes) = load_half(&root.join("train"))?;
        let test_dir = root.join("test");
        let (test_images, test_labels) = if test_dir.is_dir() {
            let (img, lab, test_classes) = load_half(&test_dir)?;
            if test_classes != classes {
                return Err(Error::Binding(format!(
                    "train has {classes} classes but test has {test_classes}"
                )));
            }
            (img, lab)
        } else {
            let (c, h, w) = {
                let d = train_images.dim();
                (d.1, d.2, d.3)
            };
            (Array4::zeros((0, c, h, w)), Vec::new())
        };
        let ds = Dataset {
            id: id.to_string(),
            classes,
            train_images,
            train_labels,
            test_images,
            test_labels,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn load_half(dir: &Path) -> Result<(Array4<f32>, Vec<usize>, usize)> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no class subdirectories",
            dir.display()
        )));
    }
    let mut images: Vec<Array3<f32>> = Vec::new();
    let mut labels = Vec::new();
    let mut resolution: Option<(usize, usize)> = None;
    for (class_id, class_dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(class_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match resolution {
                None => resolution = Some((h, w)),
                Some((eh, ew)) if (h, w) != (eh, ew) => {
                    return Err(Error::Shape(format!(
                        "{}: {h}x{w} differs from {eh}x{ew}",
                        file.display()
                    )))
                }
                _ => {}
            }
            let mut arr = Array3::<f32>::zeros((3, h, w));
            for y in 0..h {
                for x in 0..w {
                    let px = img.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        arr[[c, y, x]] = px.0[c] as f32 / 127.5 - 1.0;
                    }
                }
            }
            images.push(arr);
            labels.push(class_id);
        }
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} contains no png images",
            dir.display()
        )));
    }
    let (h, w) = resolution.unwrap();
    let mut out = Array4::<f32>::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok((out, labels, class_dirs.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_roundtrip_preserves_pixels_and_labels() {
        let ds = synthetic::gratings("toy", 3, 4, 2, 8, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bin");
        ds.save_packed(&path).unwrap();
        let back = Dataset::load_packed(&path).unwrap();
        assert_eq!(back.id, ds.id);
        assert_eq!(back.classes, 3);
        assert_eq!(back.train_labels, ds.train_labels);
        assert_eq!(back.test_labels, ds.test_labels);
        // Pixels survive up to the 8-bit quantization step.
        let max_err = ds
            .train_images
            .iter()
            .zip(back.train_images.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 127.5, "max quantization error {max_err}");
    }

    #[test]
    fn validate_rejects_sparse_labels() {
        let mut ds = synthetic::gratings("toy", 2, 3, 2, 8, 9);
        ds.classes = 3;
        assert!(matches!(ds.validate(), Err(Error::Integrity(_))));
    }

    #[test]
    fn directory_ingestion_roundtrips_a_grid_of_pngs() {
        let ds = synthetic::gratings("toy", 2, 3, 1, 8, 4);
        let dir = tempfile::tempdir().unwrap();
        for (i, &label) in ds.train_labels.iter().enumerate() {
            let class_dir = dir.path().join("train").join(format!("class{label}"));
            std::fs::create_dir_all(&class_dir).unwrap();
            let img = ds.train_image(i);
            let mut out = image::RgbImage::new(8, 8);
            for y in 0..8 {
                for x in 0..8 {
                    let px: [u8; 3] = std::array::from_fn(|c| {
                        ((img[[c, y, x]].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                    });
                    out.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            out.save(class_dir.join(format!("{i}.png"))).unwrap();
        }
        let back = Dataset::load_directory(dir.path(), "toy-dir").unwrap();
        assert_eq!(back.classes, 2);
        assert_eq!(back.train_labels.len(), 6);
        assert_eq!(back.test_labels.len(), 0);
    }
}
