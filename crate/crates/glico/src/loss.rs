//! Loss functions: the perceptual reconstruction loss, the classification
//! regularizer in its three variants, and their combination.
//!
//! The perceptual term is a weighted sum over extractor taps of the mean
//! absolute feature difference. Per-layer means make the weights scale-free
//! across taps of different sizes.

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::latent::NoiseSpec;
use crate::models::{
    ClassifierState, FeatureExtractor, GeneratorState, LatentClassifier, Mounted,
};
use crate::rng::Stream;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Which classification term regularizes the latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Cross-entropy of the image classifier on generated images.
    #[default]
    Standard,
    /// One minus cosine similarity between penultimate features and the
    /// target class prototype.
    Cosine,
    /// Cross-entropy of a 3-layer MLP applied directly to the codes.
    LatentClassifier,
}

/// Tap weights, classification weight and variant selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// One weight per extractor tap.
    pub layer_weights: Vec<f32>,
    /// Weight of the classification term; 0 disables it.
    pub gamma: f32,
    pub variant: LossVariant,
}

impl LossSpec {
    /// Uniform weights `1/taps` for each tap.
    pub fn uniform(taps: usize, gamma: f32) -> Self {
        LossSpec {
            layer_weights: vec![1.0 / taps as f32; taps],
            gamma,
            variant: LossVariant::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_weights.is_empty() {
            return Err(Error::Config("layer_weights must be nonempty".into()));
        }
        if self.layer_weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("layer weights must be nonnegative".into()));
        }
        if self.layer_weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one layer weight must be positive".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        Ok(())
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::uniform(5, 1.0)
    }
}

fn check_taps(spec: &LossSpec, fe: &FeatureExtractor) -> Result<()> {
    spec.validate()?;
    if spec.layer_weights.len() != fe.tap_count() {
        return Err(Error::Config(format!(
            "{} layer weights for an extractor with {} taps",
            spec.layer_weights.len(),
            fe.tap_count()
        )));
    }
    Ok(())
}

/// Tap activations of the target images, extracted once and reused across
/// steps; targets are constants, so this also keeps the backward pass off
/// the target branch.
pub fn extract_target_taps(fe: &FeatureExtractor, x: &Arr) -> Result<Vec<Arr>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let taps = fe.extract(&mut tape, xv)?;
    Ok(taps.vars.iter().map(|v| tape.value(*v).clone()).collect())
}

/// Perceptual loss node between a generated batch on the tape and fixed
/// target taps.
pub fn perceptual_loss_from_targets(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    spec: &LossSpec,
    generated: Var,
    target_taps: &[Arr],
) -> Result<Var> {
    check_taps(spec, fe)?;
    if target_taps.len() != fe.tap_count() {
        return Err(Error::Shape(format!(
            "{} target taps for an extractor with {} taps",
            target_taps.len(),
            fe.tap_count()
        )));
    }
    let gen_taps = fe.extract(tape, generated)?;
    let mut total: Option<Var> = None;
    for (j, (gv, target)) in gen_taps.vars.iter().zip(target_taps).enumerate() {
        if tape.shape(*gv) != target.shape() {
            return Err(Error::Shape(format!(
                "tap {j}: generated {:?} vs target {:?}",
                tape.shape(*gv),
                target.shape()
            )));
        }
        let tv = tape.leaf(target.clone());
        let diff = tape.sub(*gv, tv)?;
        let a = tape.abs(diff);
        let m = tape.mean_all(a);
        let weighted = tape.scale(m, spec.layer_weights[j]);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Perceptual loss between two image batches already on the tape.
pub fn perceptual_loss_var(
    tape: &mut Tape,
    fe: &FeatureExtractor,
    spec: &LossSpec,
    x: Var,
    x_hat: Var,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::Shape(format!(
            "perceptual loss inputs {:?} vs {:?}",
            tape.shape(x),
            tape.shape(x_hat)
        )));
    }
    check_taps(spec, fe)?;
    let x_taps = fe.extract(tape, x)?;
    let h_taps = fe.extract(tape, x_hat)?;
    let mut total: Option<Var> = None;
    for (j, (xv, hv)) in x_taps.vars.iter().zip(&h_taps.vars).enumerate() {
        let diff = tape.sub(*hv, *xv)?;
        let a = tape.abs(diff);
        let m = tape.mean_all(a);
        let weighted = tape.scale(m, spec.layer_weights[j]);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Scalar perceptual loss between two image batches.
pub fn perceptual_loss(
    x: &Arr,
    x_hat: &Arr,
    fe: &FeatureExtractor,
    spec: &LossSpec,
) -> Result<f32> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let hv = tape.leaf(x_hat.clone());
    let loss = perceptual_loss_var(&mut tape, fe, spec, xv, hv)?;
    Ok(tape.scalar(loss))
}

/// Scalar categorical cross-entropy of one logits row.
pub fn cross_entropy_loss(logits: &[f32], target: usize) -> Result<f32> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty logits".into()));
    }
    let mut tape = Tape::new();
    let l = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, logits.len()]), logits.to_vec()).unwrap());
    let loss = tape.cross_entropy(l, &[target])?;
    Ok(tape.scalar(loss))
}

/// Cosine classification loss node: `1 - cos(features, prototype[y])`
/// averaged over the batch. Errors on zero-norm features.
pub fn cosine_loss_var(
    tape: &mut Tape,
    features: Var,
    prototypes: Var,
    targets: &[usize],
) -> Result<Var> {
    let fshape = tape.shape(features).to_vec();
    if fshape.len() != 2 || fshape[0] != targets.len() {
        return Err(Error::Shape(format!(
            "cosine loss: features {fshape:?} vs {} targets",
            targets.len()
        )));
    }
    let f_unit = tape.normalize_rows(features)?;
    let sel = tape.rows_by_index(prototypes, targets)?;
    let p_unit = tape.normalize_rows(sel)?;
    let cos = tape.row_dot(f_unit, p_unit)?;
    let mean = tape.mean_all(cos);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_const(neg, 1.0))
}

/// Scalar cosine classification loss for one feature row against a
/// prototype table.
pub fn cosine_classification_loss(
    penultimate: &[f32],
    prototypes: &Array2<f32>,
    target: usize,
) -> Result<f32> {
    if target >= prototypes.nrows() {
        return Err(Error::InvalidArgument(format!(
            "class {target} out of range [0, {})",
            prototypes.nrows()
        )));
    }
    let mut tape = Tape::new();
    let f = tape.leaf(
        ArrayD::from_shape_vec(IxDyn(&[1, penultimate.len()]), penultimate.to_vec()).unwrap(),
    );
    let p = tape.leaf(prototypes.clone().into_dyn());
    let loss = cosine_loss_var(&mut tape, f, p, &[target])?;
    Ok(tape.scalar(loss))
}

/// Scalar cross-entropy of the latent classifier applied to one code.
pub fn latent_classifier_loss(
    lc: &LatentClassifier,
    code: &[f32],
    target: usize,
) -> Result<f32> {
    let mut tape = Tape::new();
    let z = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, code.len()]), code.to_vec()).unwrap());
    let mut mounted = Mounted::new();
    let logits = lc.forward(&mut tape, z, &mut mounted)?;
    let loss = tape.cross_entropy(logits, &[target])?;
    Ok(tape.scalar(loss))
}

/// Per-term scalar values of one combined-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f32,
    pub perceptual: f32,
    /// Classification term before weighting by gamma; 0 when gated off.
    pub classification: f32,
    /// Number of per-example classification-loss evaluations performed.
    pub ce_evals: usize,
}

/// Combined objective for a batch: perceptual plus `gamma` times the
/// classification term of the configured variant. Unlabeled batches and
/// `gamma = 0` evaluate the perceptual term only; the classification branch
/// is then never entered, so its parameters see no gradient at all.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    x: &Arr,
    codes: &Array2<f32>,
    labels: Option<&[usize]>,
    gen: &GeneratorState,
    cls: Option<&mut ClassifierState>,
    latent_cls: Option<&LatentClassifier>,
    fe: &FeatureExtractor,
    spec: &LossSpec,
    noise: &NoiseSpec,
    rng: &mut Stream,
) -> Result<LossBreakdown> {
    let n = codes.nrows();
    if x.shape()[0] != n {
        return Err(Error::Shape(format!(
            "{} images vs {} codes",
            x.shape()[0],
            n
        )));
    }
    let mut tape = Tape::new();
    let code_var = tape.leaf(codes.clone().into_dyn());
    let input = mount_generator_input(&mut tape, code_var, n, noise, rng)?;
    let mut mounted = Mounted::new();
    let generated = gen.forward(&mut tape, input, &mut mounted)?;
    let x_var = tape.leaf(x.clone());
    let percep = perceptual_loss_var(&mut tape, fe, spec, x_var, generated)?;

    let mut breakdown = LossBreakdown {
        total: tape.scalar(percep),
        perceptual: tape.scalar(percep),
        classification: 0.0,
        ce_evals: 0,
    };
    let Some(targets) = labels else {
        return Ok(breakdown);
    };
    if spec.gamma == 0.0 {
        return Ok(breakdown);
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} examples", targets.len())));
    }
    let class_term = match spec.variant {
        LossVariant::Standard => {
            let cls = cls.ok_or_else(|| {
                Error::Config("standard variant needs an image classifier".into())
            })?;
            let out = cls.forward(&mut tape, generated, &mut mounted, true)?;
            tape.cross_entropy(out.logits, targets)?
        }
        LossVariant::Cosine => {
            let cls = cls.ok_or_else(|| {
                Error::Config("cosine variant needs an image classifier".into())
            })?;
            let out = cls.forward(&mut tape, generated, &mut mounted, true)?;
            let protos = cls.mount_prototypes(&mut tape, &mut mounted);
            cosine_loss_var(&mut tape, out.features, protos, targets)?
        }
        LossVariant::LatentClassifier => {
            let lc = latent_cls.ok_or_else(|| {
                Error::Config("latent-classifier variant needs the latent head".into())
            })?;
            let logits = lc.forward(&mut tape, code_var, &mut mounted)?;
            tape.cross_entropy(logits, targets)?
        }
    };
    let weighted = tape.scale(class_term, spec.gamma);
    let total = tape.add(percep, weighted)?;
    breakdown.total = tape.scalar(total);
    breakdown.classification = tape.scalar(class_term);
    breakdown.ce_evals = n;
    Ok(breakdown)
}

/// Builds the generator input rows on the tape: the code block (which
/// receives gradients) concatenated with a fresh no-grad gaussian noise
/// block per example.
pub fn mount_generator_input(
    tape: &mut Tape,
    code_var: Var,
    n: usize,
    noise: &NoiseSpec,
    rng: &mut Stream,
) -> Result<Var> {
    if noise.noise_dim == 0 {
        return Ok(code_var);
    }
    let data: Vec<f32> = (0..n * noise.noise_dim)
        .map(|_| rng.next_gaussian() * noise.sigma)
        .collect();
    let eps = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[n, noise.noise_dim]), data).unwrap());
    tape.concat_cols(code_var, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ExtractorConfig, ExtractorInput};

    fn tiny_extractor() -> FeatureExtractor {
        let cfg = ExtractorConfig {
            base_width: 4,
            blocks: 3,
            in_channels: 3,
            input: ExtractorInput::Native,
        };
        FeatureExtractor::seeded(cfg, 21).unwrap()
    }

    fn image(seed: u64, hw: usize) -> Arr {
        let mut s = Stream::new(seed, "img");
        let data: Vec<f32> = (0..3 * hw * hw).map(|_| s.next_gaussian().clamp(-1.0, 1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(&[1, 3, hw, hw]), data).unwrap()
    }

    #[test]
    fn perceptual_loss_is_zero_on_identical_inputs() {
        let fe = tiny_extractor();
        let spec = LossSpec::uniform(3, 0.0);
        let x = image(1, 8);
        let l = perceptual_loss(&x, &x, &fe, &spec).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn perceptual_loss_is_symmetric_and_nonnegative() {
        let fe = tiny_extractor();
        let spec = LossSpec::uniform(3, 0.0);
        let (x, y) = (image(1, 8), image(2, 8));
        let a = perceptual_loss(&x, &y, &fe, &spec).unwrap();
        let b = perceptual_loss(&y, &x, &fe, &spec).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn perceptual_loss_is_linear_in_layer_weights() {
        let fe = tiny_extractor();
        let (x, y) = (image(3, 8), image(4, 8));
        let w1 = LossSpec { layer_weights: vec![1.0, 0.0, 0.0], gamma: 0.0, variant: LossVariant::Standard };
        let w2 = LossSpec { layer_weights: vec![2.0, 0.0, 0.0], gamma: 0.0, variant: LossVariant::Standard };
        let a = perceptual_loss(&x, &y, &fe, &w1).unwrap();
        let b = perceptual_loss(&x, &y, &fe, &w2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-5 * b.abs().max(1.0), "{b} vs 2*{a}");
    }

    #[test]
    fn mismatched_shapes_are_a_shape_error() {
        let fe = tiny_extractor();
        let spec = LossSpec::uniform(3, 0.0);
        assert!(matches!(
            perceptual_loss(&image(1, 8), &image(1, 16), &fe, &spec),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn loss_spec_validation_rejects_bad_weights() {
        assert!(LossSpec { layer_weights: vec![], gamma: 0.0, variant: LossVariant::Standard }
            .validate()
            .is_err());
        assert!(LossSpec { layer_weights: vec![0.0; 3], gamma: 0.0, variant: LossVariant::Standard }
            .validate()
            .is_err());
        assert!(LossSpec { layer_weights: vec![-1.0, 1.0], gamma: 0.0, variant: LossVariant::Standard }
            .validate()
            .is_err());
        assert!(LossSpec { layer_weights: vec![1.0], gamma: -0.1, variant: LossVariant::Standard }
            .validate()
            .is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in [2usize, 10, 100] {
            let l = cross_entropy_loss(&vec![0.7; c], c - 1).unwrap();
            assert!((l - (c as f32).ln()).abs() < 1e-6, "C = {c}");
        }
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut logits = vec![0.0f32; 10];
        logits[3] = 1e6;
        assert!(cross_entropy_loss(&logits, 3).unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        assert!(matches!(
            cross_entropy_loss(&[0.0, 1.0], 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn cosine_loss_hits_trivial_anchors() {
        let protos = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        // Aligned features: loss 0.
        let l = cosine_classification_loss(&[2.0, 0.0, 0.0], &protos, 0).unwrap();
        assert!(l.abs() < 1e-6);
        // Orthogonal: loss 1.
        let l = cosine_classification_loss(&[0.0, 0.0, 5.0], &protos, 0).unwrap();
        assert!((l - 1.0).abs() < 1e-6);
        // Anti-aligned: loss 2.
        let l = cosine_classification_loss(&[-1.0, 0.0, 0.0], &protos, 0).unwrap();
        assert!((l - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_loss_matches_direct_formula_on_random_input() {
        let mut s = Stream::new(5, "cosine");
        let protos = {
            let data: Vec<f32> = (0..10 * 6).map(|_| s.next_gaussian()).collect();
            Array2::from_shape_vec((10, 6), data).unwrap()
        };
        let feats: Vec<f32> = (0..6).map(|_| s.next_gaussian()).collect();
        let y = 7usize;
        let got = cosine_classification_loss(&feats, &protos, y).unwrap();

        let fn_ = (feats.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt();
        let p: Vec<f64> = protos.row(y).iter().map(|v| *v as f64).collect();
        let pn = (p.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let dot: f64 = feats.iter().zip(&p).map(|(a, b)| *a as f64 * b).sum();
        let expect = 1.0 - dot / (fn_ * pn);
        assert!((0.0..=2.0).contains(&got));
        assert!((got as f64 - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn cosine_loss_rejects_zero_features() {
        let protos = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            cosine_classification_loss(&[0.0, 0.0], &protos, 0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn latent_classifier_loss_composes_mlp_and_ce() {
        let lc = LatentClassifier::new(4, 8, 3, 2).unwrap();
        let l = latent_classifier_loss(&lc, &[0.1, -0.2, 0.5, 0.3], 1).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn latent_classifier_grad_matches_finite_differences() {
        use crate::autodiff::finite_diff::compare_at;
        let lc = LatentClassifier::new(6, 16, 4, 3).unwrap();
        let z0 = ArrayD::from_shape_vec(IxDyn(&[1, 6]), vec![0.3, -0.1, 0.4, 0.2, -0.5, 0.1])
            .unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(z0.clone());
        let mut mounted = Mounted::new();
        let logits = lc.forward(&mut tape, z, &mut mounted).unwrap();
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(z, &tape);
        let mut f = |zp: &Arr| {
            let mut t = Tape::new();
            let v = t.leaf(zp.clone());
            let mut m = Mounted::new();
            let lg = lc.forward(&mut t, v, &mut m).unwrap();
            let l = t.cross_entropy(lg, &[2]).unwrap();
            t.scalar(l)
        };
        let coords: Vec<usize> = (0..6).collect();
        for p in compare_at(&mut f, &z0, &analytic, &coords, 1e-3, 1e-4) {
            assert!(p.rel_err < 1e-2, "{p:?}");
        }
    }
}
