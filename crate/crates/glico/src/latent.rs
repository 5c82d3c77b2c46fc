//! Per-example latent codes on the unit hypersphere and the geometric
//! operations the sampler and trainer build on: initialization, sphere
//! projection, spherical and linear interpolation, same-class partner
//! selection and noise concatenation.
//!
//! Interpolation math runs in `f64` and the result is renormalized before
//! rounding back to `f32`, so emitted codes stay unit-norm well inside the
//! `1e-5` tolerance the rest of the crate assumes.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::rng::Stream;
use ndarray::{Array2, ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::path::Path;

/// Class label of a codebook entry; `None` marks an unlabeled example.
pub type Label = Option<usize>;

/// A unit-norm vector in the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    values: Vec<f32>,
}

impl LatentCode {
    /// Wraps a vector that is already unit norm (within 1e-5).
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("latent code of dimension 0".into()));
        }
        let n = norm(&values);
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "latent code norm {n} is not 1 within 1e-5"
            )));
        }
        Ok(LatentCode { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Projects a vector onto the unit sphere.
///
/// Errors with [`Error::DegenerateInput`] on the zero vector, whose
/// direction is undefined.
pub fn project_to_sphere(v: &[f32]) -> Result<LatentCode> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("empty vector".into()));
    }
    let n = norm(v);
    if n <= 0.0 {
        return Err(Error::DegenerateInput(
            "cannot project the zero vector onto the sphere".into(),
        ));
    }
    let values = v.iter().map(|x| (*x as f64 / n) as f32).collect();
    Ok(LatentCode { values })
}

/// Spherical linear interpolation along the great circle from `q1` to `q2`:
/// `q1 sin((1-t)θ)/sin θ + q2 sin(tθ)/sin θ` with `θ = arccos(q1 · q2)`.
///
/// Near-parallel pairs (`sin θ < 1e-7`) fall back to [`lerp`], its analytic
/// limit. Antipodal pairs are rejected: every great circle through them is
/// equally valid, so the caller should retry with a different partner.
pub fn slerp(q1: &LatentCode, q2: &LatentCode, t: f32) -> Result<LatentCode> {
    check_pair(q1, q2, t)?;
    let dot = q1.dot(q2).clamp(-1.0, 1.0);
    let theta = dot.acos();
    let sin_theta = theta.sin();
    if sin_theta < 1e-7 {
        if dot < 0.0 {
            return Err(Error::DegeneratePair(
                "antipodal codes: interpolation arc is ambiguous".into(),
            ));
        }
        return lerp(q1, q2, t);
    }
    let c1 = ((1.0 - t as f64) * theta).sin() / sin_theta;
    let c2 = (t as f64 * theta).sin() / sin_theta;
    combine(q1, q2, c1, c2)
}

/// Linear interpolation `(1-t) q1 + t q2`, re-projected onto the sphere so
/// the result is a valid generator input.
///
/// Exact antipodes at `t = 0.5` produce the zero vector and error out.
pub fn lerp(q1: &LatentCode, q2: &LatentCode, t: f32) -> Result<LatentCode> {
    check_pair(q1, q2, t)?;
    combine(q1, q2, 1.0 - t as f64, t as f64)
}

fn check_pair(q1: &LatentCode, q2: &LatentCode, t: f32) -> Result<()> {
    if q1.dim() != q2.dim() {
        return Err(Error::Shape(format!(
            "interpolating codes of dimension {} and {}",
            q1.dim(),
            q2.dim()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "interpolation factor {t} outside [0, 1]"
        )));
    }
    Ok(())
}

fn combine(q1: &LatentCode, q2: &LatentCode, c1: f64, c2: f64) -> Result<LatentCode> {
    let mixed: Vec<f64> = q1
        .values
        .iter()
        .zip(&q2.values)
        .map(|(a, b)| c1 * *a as f64 + c2 * *b as f64)
        .collect();
    let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::DegeneratePair(
            "interpolation collapsed to the zero vector".into(),
        ));
    }
    Ok(LatentCode {
        values: mixed.iter().map(|x| (x / n) as f32).collect(),
    })
}

/// Shape and scale of the gaussian noise block concatenated to a code
/// before generation. `noise_dim = 0` disables concatenation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub noise_dim: usize,
    pub sigma: f32,
}

impl NoiseSpec {
    pub fn new(noise_dim: usize, sigma: f32) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("negative sigma {sigma}")));
        }
        Ok(NoiseSpec { noise_dim, sigma })
    }

    /// No noise block at all (the "no noise" ablation).
    pub fn disabled() -> Self {
        NoiseSpec { noise_dim: 0, sigma: 0.0 }
    }
}

impl Default for NoiseSpec {
    /// The noise block's width and scale are free parameters; these defaults
    /// are configurable everywhere they are consumed.
    fn default() -> Self {
        NoiseSpec { noise_dim: 32, sigma: 0.1 }
    }
}

/// Concatenates `z` with `noise_dim` fresh gaussian draws of std `sigma`.
/// The code block of the result is byte-identical to `z`.
pub fn make_generator_input(z: &LatentCode, noise: &NoiseSpec, rng: &mut Stream) -> Vec<f32> {
    let mut out = Vec::with_capacity(z.dim() + noise.noise_dim);
    out.extend_from_slice(z.values());
    for _ in 0..noise.noise_dim {
        out.push(rng.next_gaussian() * noise.sigma);
    }
    out
}

/// The learned per-example code set: one unit-norm code per training index,
/// with optional class labels and a class-to-members index.
#[derive(Debug, Clone)]
pub struct LatentCodebook {
    codes: Array2<f32>,
    labels: Vec<Label>,
    class_index: BTreeMap<usize, Vec<usize>>,
    dim: usize,
    seed: u64,
}

impl LatentCodebook {
    /// Random initialization: isotropic gaussian draws projected to the
    /// sphere, deterministic in `seed`.
    pub fn init_random(n: usize, dim: usize, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs n >= 1 and dim >= 1, got n={n}, dim={dim}"
            )));
        }
        let mut stream = Stream::new(seed, "codes-init");
        let mut codes = Array2::<f32>::zeros((n, dim));
        for mut row in codes.rows_mut() {
            let raw: Vec<f32> = (0..dim).map(|_| stream.next_gaussian()).collect();
            let unit = project_to_sphere(&raw)?;
            for (slot, v) in row.iter_mut().zip(unit.values()) {
                *slot = *v;
            }
        }
        let labels = vec![None; n];
        Ok(Self::assemble(codes, labels, seed))
    }

    /// Class-structured initialization: class `c` sits near the hypercube
    /// vertex selected by the Gray code of `c`, scaled to the unit sphere;
    /// members are scattered around it by `jitter`-scaled gaussian noise.
    pub fn init_hypercube(labels: &[usize], dim: usize, jitter: f32, seed: u64) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument(
                "hypercube init needs labels and dim >= 1".into(),
            ));
        }
        let classes = labels.iter().copied().max().unwrap() + 1;
        if dim < 64 && classes > (1usize << dim) {
            return Err(Error::Capacity(format!(
                "{classes} classes exceed the 2^{dim} hypercube vertices"
            )));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let mut stream = Stream::new(seed, "codes-init-hypercube");
        let mut codes = Array2::<f32>::zeros((labels.len(), dim));
        for (i, (&label, mut row)) in labels.iter().zip(codes.rows_mut()).enumerate() {
            let gray = (label as u64) ^ ((label as u64) >> 1);
            let mut raw = Vec::with_capacity(dim);
            for bit in 0..dim {
                let sign = if bit < 64 && (gray >> bit) & 1 == 1 { -1.0 } else { 1.0 };
                raw.push((sign * scale) as f32 + jitter * stream.next_gaussian());
            }
            let unit = project_to_sphere(&raw).map_err(|_| {
                Error::DegenerateInput(format!("jitter collapsed code {i} to zero"))
            })?;
            for (slot, v) in row.iter_mut().zip(unit.values()) {
                *slot = *v;
            }
        }
        let labels = labels.iter().map(|&c| Some(c)).collect();
        Ok(Self::assemble(codes, labels, seed))
    }

    /// Initialization from externally supplied embedding vectors (for
    /// example, pooled features of a pretrained network), one per example,
    /// each projected to the sphere.
    pub fn init_from_embeddings(
        embeddings: &Array2<f32>,
        labels: &[Label],
        seed: u64,
    ) -> Result<Self> {
        if embeddings.nrows() == 0 || embeddings.ncols() == 0 {
            return Err(Error::InvalidArgument("empty embedding matrix".into()));
        }
        if labels.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} embeddings vs {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        let mut codes = Array2::<f32>::zeros(embeddings.raw_dim());
        for (i, (src, mut dst)) in embeddings.rows().into_iter().zip(codes.rows_mut()).enumerate() {
            let raw: Vec<f32> = src.iter().copied().collect();
            let unit = project_to_sphere(&raw)
                .map_err(|_| Error::DegenerateInput(format!("embedding {i} has zero norm")))?;
            for (slot, v) in dst.iter_mut().zip(unit.values()) {
                *slot = *v;
            }
        }
        Ok(Self::assemble(codes, labels.to_vec(), seed))
    }

    fn assemble(codes: Array2<f32>, labels: Vec<Label>, seed: u64) -> Self {
        let dim = codes.ncols();
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, label) in labels.iter().enumerate() {
            if let Some(c) = label {
                class_index.entry(*c).or_default().push(i);
            }
        }
        LatentCodebook { codes, labels, class_index, dim, seed }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self, i: usize) -> Result<Label> {
        self.labels
            .get(i)
            .copied()
            .ok_or(Error::MissingCode(i))
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Indices belonging to `class`, in insertion order.
    pub fn class_members(&self, class: usize) -> &[usize] {
        self.class_index.get(&class).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_index.keys().copied()
    }

    pub fn code(&self, i: usize) -> Result<LatentCode> {
        if i >= self.len() {
            return Err(Error::MissingCode(i));
        }
        Ok(LatentCode {
            values: self.codes.row(i).iter().copied().collect(),
        })
    }

    /// Raw `(n, d)` code matrix.
    pub fn codes(&self) -> &Array2<f32> {
        &self.codes
    }

    /// Sets labels after the fact (used when pairing an unlabeled-init
    /// codebook with a labeled split). Rebuilds the class index.
    pub fn set_labels(&mut self, labels: Vec<Label>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} codes",
                labels.len(),
                self.len()
            )));
        }
        *self = Self::assemble(std::mem::take(&mut self.codes), labels, self.seed);
        Ok(())
    }

    /// Overwrites row `i` with `updated`, then re-projects it to the sphere.
    /// This is the per-step renormalization of the training loop.
    pub fn store_projected(&mut self, i: usize, updated: &[f32]) -> Result<()> {
        if i >= self.len() {
            return Err(Error::MissingCode(i));
        }
        if updated.len() != self.dim {
            return Err(Error::Shape(format!(
                "code of dim {} stored into codebook of dim {}",
                updated.len(),
                self.dim
            )));
        }
        let unit = project_to_sphere(updated)?;
        for (slot, v) in self.codes.row_mut(i).iter_mut().zip(unit.values()) {
            *slot = *v;
        }
        Ok(())
    }

    /// Largest deviation of any row norm from 1. The trainer's sphere
    /// invariant asserts this stays below 1e-5.
    pub fn max_norm_deviation(&self) -> f64 {
        self.codes
            .rows()
            .into_iter()
            .map(|r| {
                let v: Vec<f32> = r.iter().copied().collect();
                (norm(&v) - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Uniform same-class partner for index `i`, excluding `i` itself.
    /// A singleton class returns `i`, making the downstream synthetic
    /// sample a noisy reconstruction.
    pub fn pick_class_partner(&self, i: usize, rng: &mut Stream) -> Result<usize> {
        let label = self.label(i)?;
        let class = label.ok_or_else(|| {
            Error::InvalidArgument(format!("index {i} is unlabeled; partners need a class"))
        })?;
        let members = self.class_members(class);
        debug_assert!(members.contains(&i), "class index out of sync with labels");
        if members.len() <= 1 {
            return Ok(i);
        }
        // Draw from the members list with `i` logically removed.
        let pos = members.iter().position(|&m| m == i).expect("member list");
        let k = rng.next_index(members.len() - 1);
        Ok(if k < pos { members[k] } else { members[k + 1] })
    }

    /// Serializes codes (row-major f32), labels (-1 = unlabeled), dim and
    /// the creating seed into one archive file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        ar.put_f32_array("codes", &self.codes.clone().into_dyn());
        let labels: Vec<i64> = self
            .labels
            .iter()
            .map(|l| l.map(|c| c as i64).unwrap_or(-1))
            .collect();
        ar.put_i64_slice("labels", &labels);
        ar.put_u64("dim", self.dim as u64);
        ar.put_u64("seed", self.seed);
        ar.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ar = Archive::load(path)?;
        Self::from_archive(&ar, "")
    }

    pub(crate) fn to_archive(&self, ar: &mut Archive, prefix: &str) {
        ar.put_f32_array(&format!("{prefix}codes"), &self.codes.clone().into_dyn());
        let labels: Vec<i64> = self
            .labels
            .iter()
            .map(|l| l.map(|c| c as i64).unwrap_or(-1))
            .collect();
        ar.put_i64_slice(&format!("{prefix}labels"), &labels);
        ar.put_u64(&format!("{prefix}dim"), self.dim as u64);
        ar.put_u64(&format!("{prefix}seed"), self.seed);
    }

    pub(crate) fn from_archive(ar: &Archive, prefix: &str) -> Result<Self> {
        let codes = ar.get_f32_array(&format!("{prefix}codes"))?;
        let dim = ar.get_u64(&format!("{prefix}dim"))? as usize;
        let seed = ar.get_u64(&format!("{prefix}seed"))?;
        let labels_raw = ar.get_i64_slice(&format!("{prefix}labels"))?;
        let shape = codes.shape().to_vec();
        if shape.len() != 2 || shape[1] != dim || shape[0] != labels_raw.len() {
            return Err(Error::Integrity("codebook sections disagree on shape".into()));
        }
        let codes = codes
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::Integrity("codes section is not 2-d".into()))?;
        let labels: Vec<Label> = labels_raw
            .iter()
            .map(|&l| if l < 0 { None } else { Some(l as usize) })
            .collect();
        Ok(Self::assemble(codes, labels, seed))
    }
}

/// Converts a plain vector to the tape-friendly dynamic array shape `(1, d)`.
pub fn input_row(values: &[f32]) -> ArrayD<f32> {
    ArrayD::from_shape_vec(IxDyn(&[1, values.len()]), values.to_vec()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> LatentCode {
        project_to_sphere(v).unwrap()
    }

    fn random_unit(dim: usize, s: &mut Stream) -> LatentCode {
        let raw: Vec<f32> = (0..dim).map(|_| s.next_gaussian()).collect();
        unit(&raw)
    }

    /// Residual of `out` against the plane spanned by `q1`, `q2`,
    /// computed with Gram-Schmidt in f64.
    fn span_residual(q1: &LatentCode, q2: &LatentCode, out: &LatentCode) -> f64 {
        let b1: Vec<f64> = q1.values().iter().map(|v| *v as f64).collect();
        let d = q1.dot(q2);
        let mut b2: Vec<f64> = q2
            .values()
            .iter()
            .zip(&b1)
            .map(|(v, b)| *v as f64 - d * b)
            .collect();
        let n2 = b2.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n2 > 1e-9 {
            for x in &mut b2 {
                *x /= n2;
            }
        }
        let o: Vec<f64> = out.values().iter().map(|v| *v as f64).collect();
        let c1: f64 = o.iter().zip(&b1).map(|(a, b)| a * b).sum();
        let c2: f64 = o.iter().zip(&b2).map(|(a, b)| a * b).sum();
        o.iter()
            .enumerate()
            .map(|(i, v)| (v - c1 * b1[i] - c2 * b2[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn project_scales_three_four_to_unit() {
        let c = unit(&[3.0, 4.0]);
        assert!((c.values()[0] - 0.6).abs() < 1e-7);
        assert!((c.values()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn project_leaves_unit_vector_unchanged() {
        let c = unit(&[1.0, 0.0, 0.0]);
        assert_eq!(c.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn project_rejects_zero_vector() {
        assert!(matches!(
            project_to_sphere(&[0.0, 0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn project_is_idempotent() {
        let mut s = Stream::new(5, "idem");
        for _ in 0..50 {
            let c = random_unit(16, &mut s);
            let again = project_to_sphere(c.values()).unwrap();
            for (a, b) in c.values().iter().zip(again.values()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn slerp_hits_endpoints() {
        let mut s = Stream::new(6, "ends");
        let q1 = random_unit(32, &mut s);
        let q2 = random_unit(32, &mut s);
        let a = slerp(&q1, &q2, 0.0).unwrap();
        let b = slerp(&q1, &q2, 1.0).unwrap();
        for (x, y) in a.values().iter().zip(q1.values()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in b.values().iter().zip(q2.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn slerp_orthogonal_midpoint_is_diagonal() {
        // Closed form at theta = pi/2, t = 0.5: both coefficients sin(pi/4).
        let e1 = unit(&[1.0, 0.0]);
        let e2 = unit(&[0.0, 1.0]);
        let m = slerp(&e1, &e2, 0.5).unwrap();
        let h = (2.0f32).sqrt() / 2.0;
        assert!((m.values()[0] - h).abs() < 1e-6);
        assert!((m.values()[1] - h).abs() < 1e-6);
    }

    #[test]
    fn lerp_orthogonal_midpoint_matches_projected_average() {
        let e1 = unit(&[1.0, 0.0]);
        let e2 = unit(&[0.0, 1.0]);
        let m = lerp(&e1, &e2, 0.5).unwrap();
        let h = (2.0f32).sqrt() / 2.0;
        assert!((m.values()[0] - h).abs() < 1e-6);
        assert!((m.values()[1] - h).abs() < 1e-6);
        let ends = lerp(&e1, &e2, 0.0).unwrap();
        assert_eq!(ends.values(), e1.values());
    }

    #[test]
    fn interpolating_a_point_with_itself_returns_it() {
        let mut s = Stream::new(7, "self");
        let q = random_unit(64, &mut s);
        let m = slerp(&q, &q, 0.3).unwrap();
        for (a, b) in m.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn antipodal_pairs_are_degenerate() {
        let q = unit(&[0.6, 0.8, 0.0]);
        let neg = unit(&[-0.6, -0.8, 0.0]);
        assert!(matches!(slerp(&q, &neg, 0.4), Err(Error::DegeneratePair(_))));
        assert!(matches!(lerp(&q, &neg, 0.5), Err(Error::DegeneratePair(_))));
    }

    /// Angle between two stored codes, with norms divided out in f64 so the
    /// measurement is conditioned near 0 despite f32 unit-norm slack.
    fn angle_between(a: &LatentCode, b: &LatentCode) -> f64 {
        (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn slerp_angle_linearity_and_symmetry() {
        let mut s = Stream::new(8, "props");
        for trial in 0..200 {
            let q1 = random_unit(128, &mut s);
            let q2 = random_unit(128, &mut s);
            let t = (trial % 11) as f32 / 10.0;
            let out = slerp(&q1, &q2, t).unwrap();
            assert!((out.norm() - 1.0).abs() < 1e-5, "norm at t={t}");
            let theta = angle_between(&q1, &q2);
            let part = angle_between(&q1, &out);
            assert!(
                (part - t as f64 * theta).abs() < 1e-4,
                "angle linearity: {part} vs {}",
                t as f64 * theta
            );
            let rev = slerp(&q2, &q1, 1.0 - t).unwrap();
            for (a, b) in out.values().iter().zip(rev.values()) {
                assert!((a - b).abs() < 1e-6, "symmetry at t={t}");
            }
            assert!(span_residual(&q1, &q2, &out) < 1e-6, "span at t={t}");
        }
    }

    #[test]
    fn init_random_is_deterministic_and_unit_norm() {
        let a = LatentCodebook::init_random(500, 128, 7).unwrap();
        let b = LatentCodebook::init_random(500, 128, 7).unwrap();
        assert_eq!(a.codes(), b.codes());
        assert!(a.max_norm_deviation() < 1e-5);
        let single = LatentCodebook::init_random(1, 2, 123).unwrap();
        assert!((single.code(0).unwrap().norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn init_random_rejects_empty() {
        assert!(LatentCodebook::init_random(0, 4, 1).is_err());
        assert!(LatentCodebook::init_random(4, 0, 1).is_err());
    }

    #[test]
    fn random_codes_concentrate_near_orthogonality() {
        // Monte-Carlo oracle: |cos| between independent unit vectors in
        // d = 128 concentrates around sqrt(2 / (pi d)) ~ 0.07.
        let mut s = Stream::new(42, "mc-oracle");
        let mut mc = 0.0f64;
        let trials = 2000;
        for _ in 0..trials {
            let a = random_unit(128, &mut s);
            let b = random_unit(128, &mut s);
            mc += a.dot(&b).abs();
        }
        mc /= trials as f64;
        assert!(mc < 0.25, "oracle mean |cos| = {mc}");

        let cb = LatentCodebook::init_random(10_000, 128, 3).unwrap();
        let mut pick = Stream::new(99, "pairs");
        let mut mean = 0.0f64;
        let pairs = 20_000;
        for _ in 0..pairs {
            let i = pick.next_index(cb.len());
            let mut j = pick.next_index(cb.len());
            while j == i {
                j = pick.next_index(cb.len());
            }
            mean += cb.code(i).unwrap().dot(&cb.code(j).unwrap()).abs();
        }
        mean /= pairs as f64;
        assert!(mean < 0.25, "codebook mean |cos| = {mean}");
        assert!((mean - mc).abs() < 0.02, "codebook {mean} vs oracle {mc}");
    }

    #[test]
    fn hypercube_zero_jitter_gives_identical_class_codes() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let cb = LatentCodebook::init_hypercube(&labels, 2, 0.0, 1).unwrap();
        assert_eq!(cb.code(0).unwrap(), cb.code(1).unwrap());
        assert_eq!(cb.code(3).unwrap(), cb.code(4).unwrap());
        let cross = cb.code(0).unwrap().dot(&cb.code(3).unwrap());
        assert!(
            cross.abs() < 1e-6 || (cross + 1.0).abs() < 1e-6,
            "vertices should be orthogonal or antipodal, got cos = {cross}"
        );
        assert!(cb.max_norm_deviation() < 1e-6);
    }

    #[test]
    fn hypercube_classes_cluster_within_before_between() {
        let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, 8)).collect();
        let cb = LatentCodebook::init_hypercube(&labels, 128, 0.1, 9).unwrap();
        let mut within = (0.0f64, 0usize);
        let mut between = (0.0f64, 0usize);
        for i in 0..cb.len() {
            for j in (i + 1)..cb.len() {
                let d = cb.code(i).unwrap().dot(&cb.code(j).unwrap());
                if cb.label(i).unwrap() == cb.label(j).unwrap() {
                    within = (within.0 + d, within.1 + 1);
                } else {
                    between = (between.0 + d, between.1 + 1);
                }
            }
        }
        let w = within.0 / within.1 as f64;
        let b = between.0 / between.1 as f64;
        assert!(w > b, "within-class cosine {w} <= between-class {b}");
    }

    #[test]
    fn hypercube_rejects_too_many_classes() {
        let labels = vec![0, 1, 2];
        assert!(matches!(
            LatentCodebook::init_hypercube(&labels, 1, 0.0, 1),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn embeddings_init_projects_rows() {
        let emb = Array2::from_shape_vec((2, 3), vec![3.0, 0.0, 4.0, 0.0, 2.0, 0.0]).unwrap();
        let cb = LatentCodebook::init_from_embeddings(&emb, &[Some(0), Some(1)], 5).unwrap();
        assert!((cb.code(0).unwrap().values()[0] - 0.6).abs() < 1e-6);
        assert!((cb.code(1).unwrap().values()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn partner_of_two_member_class_is_the_other() {
        let emb = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cb = LatentCodebook::init_from_embeddings(&emb, &[Some(0), Some(0)], 1).unwrap();
        let mut rng = Stream::new(4, "partner");
        for _ in 0..20 {
            assert_eq!(cb.pick_class_partner(0, &mut rng).unwrap(), 1);
            assert_eq!(cb.pick_class_partner(1, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn partner_of_singleton_class_is_self() {
        let emb = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let cb = LatentCodebook::init_from_embeddings(&emb, &[Some(3)], 1).unwrap();
        let mut rng = Stream::new(4, "partner");
        assert_eq!(cb.pick_class_partner(0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn partner_of_unlabeled_index_is_invalid() {
        let cb = LatentCodebook::init_random(3, 4, 1).unwrap();
        let mut rng = Stream::new(4, "partner");
        assert!(matches!(
            cb.pick_class_partner(0, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn partner_frequencies_are_uniform() {
        // Binomial oracle: p = 1/10 over 10^4 draws gives 1000 +- 150
        // (five standard deviations of sqrt(n p (1-p)) ~ 30).
        let labels = vec![0usize; 11];
        let cb = LatentCodebook::init_hypercube(&labels, 8, 0.1, 2).unwrap();
        let mut rng = Stream::new(11, "freq");
        let mut counts = vec![0usize; 11];
        for _ in 0..10_000 {
            let p = cb.pick_class_partner(4, &mut rng).unwrap();
            assert_ne!(p, 4);
            counts[p] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            if i == 4 {
                assert_eq!(c, 0);
            } else {
                assert!((c as i64 - 1000).abs() <= 150, "partner {i} drawn {c} times");
            }
        }
    }

    #[test]
    fn generator_input_concatenates_noise() {
        let mut rng = Stream::new(3, "noise");
        let z = unit(&[0.6, 0.8]);

        let plain = make_generator_input(&z, &NoiseSpec::disabled(), &mut rng);
        assert_eq!(plain, z.values());

        let zeroed = make_generator_input(&z, &NoiseSpec::new(16, 0.0).unwrap(), &mut rng);
        assert_eq!(&zeroed[..2], z.values());
        assert!(zeroed[2..].iter().all(|v| *v == 0.0));
        assert_eq!(zeroed.len(), 18);
    }

    #[test]
    fn noise_block_std_matches_sigma() {
        let mut rng = Stream::new(5, "noise-std");
        let z = unit(&[1.0, 0.0]);
        let spec = NoiseSpec::new(32, 1.0).unwrap();
        let mut vals = Vec::with_capacity(100_000);
        for _ in 0..3125 {
            let input = make_generator_input(&z, &spec, &mut rng);
            assert_eq!(&input[..2], z.values());
            vals.extend_from_slice(&input[2..]);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = vals.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn negative_sigma_is_rejected() {
        assert!(NoiseSpec::new(4, -0.5).is_err());
    }

    #[test]
    fn codebook_roundtrips_through_archive() {
        let labels = vec![0, 0, 1, 1, 2];
        let mut cb = LatentCodebook::init_hypercube(&labels, 16, 0.2, 13).unwrap();
        cb.set_labels(vec![Some(0), Some(0), None, Some(1), Some(1)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.bin");
        cb.save(&path).unwrap();
        let back = LatentCodebook::load(&path).unwrap();
        assert_eq!(back.codes(), cb.codes());
        assert_eq!(back.labels(), cb.labels());
        assert_eq!(back.dim(), cb.dim());
        assert_eq!(back.seed(), cb.seed());
        assert_eq!(back.class_members(0), &[0, 1]);
        assert!(back.class_members(2).is_empty());
    }

    #[test]
    fn store_projected_renormalizes() {
        let mut cb = LatentCodebook::init_random(2, 4, 1).unwrap();
        cb.store_projected(1, &[2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cb.code(1).unwrap().values(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            cb.store_projected(1, &[0.0; 4]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(cb.store_projected(9, &[1.0; 4]), Err(Error::MissingCode(9))));
    }
}
