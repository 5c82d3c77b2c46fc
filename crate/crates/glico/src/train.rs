//! Joint optimization of latent codes, generator and classifier.
//!
//! Each epoch runs `oversample_factor` labeled passes and, in transductive
//! mode, the same number of unlabeled passes afterwards. Every step draws
//! fresh noise per example, takes one Adam step on the batch codes, the
//! generator and (labeled, `gamma > 0`) the classifier, then re-projects
//! the touched codes onto the unit sphere.
//!
//! All compute is single-threaded and every random draw comes from a named
//! substream of the master seed, so a run is a pure function of its
//! configuration: repeating a seed reproduces the loss history bit for bit.

use crate::archive::Archive;
use crate::autodiff::{Arr, Tape};
use crate::error::{Error, Result};
use crate::latent::{LatentCodebook, NoiseSpec};
use crate::loss::{
    cosine_loss_var, mount_generator_input, perceptual_loss_from_targets, LossSpec, LossVariant,
};
use crate::models::{
    ClassifierState, FeatureExtractor, GeneratorState, LatentClassifier, Mounted,
};
use crate::optim::{Adam, RowAdam};
use crate::rng::Stream;
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate of the per-example codes.
    pub code_lr: f32,
    pub gen_lr: f32,
    pub cls_lr: f32,
    /// Only "adam" is available.
    pub optimizer_id: String,
    pub batch_size: usize,
    pub noise: NoiseSpec,
    /// Inner repetitions of the labeled/unlabeled passes per epoch; scaled
    /// up as the sample shrinks to keep the step count comparable.
    pub oversample_factor: usize,
    pub transductive: bool,
    /// Noise is added to the code (then re-projected) instead of
    /// concatenated; the generator input width is then just the code dim.
    pub additive_noise: bool,
    pub seed: u64,
    /// Checkpoint every this many epochs when a directory is given;
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            code_lr: 1e-2,
            gen_lr: 1e-3,
            cls_lr: 1e-3,
            optimizer_id: "adam".into(),
            batch_size: 16,
            noise: NoiseSpec::default(),
            oversample_factor: 1,
            transductive: false,
            additive_noise: false,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_lr <= 0.0 || self.gen_lr <= 0.0 || self.cls_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.oversample_factor == 0 {
            return Err(Error::Config("oversample_factor must be >= 1".into()));
        }
        if self.optimizer_id != "adam" {
            return Err(Error::Config(format!(
                "unknown optimizer '{}'",
                self.optimizer_id
            )));
        }
        Ok(())
    }
}

/// Whether a step consumed labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Labeled,
    Unlabeled,
}

/// One line of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub mode: StepMode,
    pub percep: f32,
    /// Unweighted classification term; absent when gated off.
    pub ce: Option<f32>,
    pub total: f32,
}

/// How the frozen extractor was obtained, recorded in checkpoints so a
/// resume can rebuild and verify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorSource {
    Seeded { seed: u64, config: crate::models::ExtractorConfig },
    File { path: PathBuf },
}

impl ExtractorSource {
    pub fn build(&self) -> Result<FeatureExtractor> {
        match self {
            ExtractorSource::Seeded { seed, config } => FeatureExtractor::seeded(*config, *seed),
            ExtractorSource::File { path } => FeatureExtractor::load(path),
        }
    }
}

/// Everything the trainer owns and mutates.
pub struct TrainState {
    pub codebook: LatentCodebook,
    pub generator: GeneratorState,
    pub classifier: Option<ClassifierState>,
    pub latent_classifier: Option<LatentClassifier>,
    pub extractor: FeatureExtractor,
    pub extractor_source: ExtractorSource,
    pub spec: LossSpec,
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    /// Per-example classification-loss evaluations, cumulative.
    pub ce_eval_count: u64,
    code_opt: RowAdam,
    gen_opt: Adam,
    cls_opt: Adam,
    latent_opt: Adam,
    noise_rng: Stream,
    order_rng: Stream,
}

impl TrainState {
    pub fn new(
        codebook: LatentCodebook,
        generator: GeneratorState,
        classifier: Option<ClassifierState>,
        latent_classifier: Option<LatentClassifier>,
        extractor: FeatureExtractor,
        extractor_source: ExtractorSource,
        spec: LossSpec,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let expected_input = if config.additive_noise {
            codebook.dim()
        } else {
            codebook.dim() + config.noise.noise_dim
        };
        if generator.input_dim() != expected_input {
            return Err(Error::Config(format!(
                "generator input dim {} but codes ({}) + noise ({}) need {}",
                generator.input_dim(),
                codebook.dim(),
                config.noise.noise_dim,
                expected_input
            )));
        }
        if spec.layer_weights.len() != extractor.tap_count() {
            return Err(Error::Config(format!(
                "{} layer weights for {} extractor taps",
                spec.layer_weights.len(),
                extractor.tap_count()
            )));
        }
        if spec.variant == LossVariant::LatentClassifier && latent_classifier.is_none() {
            return Err(Error::Config(
                "latent-classifier variant needs a latent classifier head".into(),
            ));
        }
        let (code_lr, n, d) = (config.code_lr, codebook.len(), codebook.dim());
        let noise_rng = Stream::new(config.seed, "train-noise");
        let order_rng = Stream::new(config.seed, "train-order");
        Ok(TrainState {
            code_opt: RowAdam::new(code_lr, n, d),
            gen_opt: Adam::new(config.gen_lr),
            cls_opt: Adam::new(config.cls_lr),
            latent_opt: Adam::new(config.cls_lr),
            codebook,
            generator,
            classifier,
            latent_classifier,
            extractor,
            extractor_source,
            spec,
            config,
            epoch: 0,
            history: Vec::new(),
            ce_eval_count: 0,
            noise_rng,
            order_rng,
        })
    }

    fn gather_codes(&self, rows: &[usize]) -> Result<Array2<f32>> {
        let mut codes = Array2::<f32>::zeros((rows.len(), self.codebook.dim()));
        for (r, &i) in rows.iter().enumerate() {
            if i >= self.codebook.len() {
                return Err(Error::MissingCode(i));
            }
            codes.row_mut(r).assign(&self.codebook.codes().row(i));
        }
        Ok(codes)
    }

    fn check_batch(&self, images: &Array4<f32>, rows: &[usize]) -> Result<()> {
        if images.dim().0 != rows.len() {
            return Err(Error::Shape(format!(
                "{} images for {} rows",
                images.dim().0,
                rows.len()
            )));
        }
        let (c, h, w) = self.generator.output_shape();
        if images.dim().1 != c || images.dim().2 != h || images.dim().3 != w {
            return Err(Error::Shape(format!(
                "batch images {:?} vs generator output ({c}, {h}, {w})",
                images.dim()
            )));
        }
        for (k, &i) in rows.iter().enumerate() {
            if rows[..k].contains(&i) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} appears twice in one batch"
                )));
            }
        }
        Ok(())
    }

    /// One optimization step on a labeled batch: codes, generator and
    /// (when `gamma > 0`) the classification head.
    pub fn train_step_labeled(
        &mut self,
        images: &Array4<f32>,
        rows: &[usize],
    ) -> Result<LossRecord> {
        self.check_batch(images, rows)?;
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            match self.codebook.label(i)? {
                Some(c) => labels.push(c),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "labeled step over unlabeled index {i}"
                    )))
                }
            }
        }
        let taps = crate::loss::extract_target_taps(&self.extractor, &images.clone().into_dyn())?;
        self.step_core(rows, &taps, Some(&labels))
    }

    /// One optimization step on an unlabeled batch: codes and generator
    /// only; classifier parameters are untouched.
    pub fn train_step_unlabeled(
        &mut self,
        images: &Array4<f32>,
        rows: &[usize],
    ) -> Result<LossRecord> {
        if !self.config.transductive {
            return Err(Error::Mode(
                "unlabeled steps need the transductive flag".into(),
            ));
        }
        self.check_batch(images, rows)?;
        let taps = crate::loss::extract_target_taps(&self.extractor, &images.clone().into_dyn())?;
        self.step_core(rows, &taps, None)
    }

    /// Shared step body. `target_taps` are the extractor activations of the
    /// batch's target images; `labels = None` runs reconstruction only.
    fn step_core(
        &mut self,
        rows: &[usize],
        target_taps: &[Arr],
        labels: Option<&[usize]>,
    ) -> Result<LossRecord> {
        let n = rows.len();
        let codes = self.gather_codes(rows)?;
        let mut tape = Tape::new();
        let code_var = tape.leaf(codes.into_dyn());
        let input = if self.config.additive_noise {
            if self.config.noise.sigma > 0.0 {
                let data: Vec<f32> = (0..n * self.codebook.dim())
                    .map(|_| self.noise_rng.next_gaussian() * self.config.noise.sigma)
                    .collect();
                let eps = tape.leaf(
                    ArrayD::from_shape_vec(IxDyn(&[n, self.codebook.dim()]), data).unwrap(),
                );
                let perturbed = tape.add(code_var, eps)?;
                tape.normalize_rows(perturbed)?
            } else {
                code_var
            }
        } else {
            mount_generator_input(
                &mut tape,
                code_var,
                n,
                &self.config.noise,
                &mut self.noise_rng,
            )?
        };
        let mut gen_mounted = Mounted::new();
        let generated = self.generator.forward(&mut tape, input, &mut gen_mounted)?;
        let percep = perceptual_loss_from_targets(
            &mut tape,
            &self.extractor,
            &self.spec,
            generated,
            target_taps,
        )?;

        let mut cls_mounted = Mounted::new();
        let mut latent_mounted = Mounted::new();
        let mut ce_var = None;
        let mut total = percep;
        if let Some(targets) = labels {
            if self.spec.gamma > 0.0 {
                let ce = match self.spec.variant {
                    LossVariant::Standard => {
                        if let Some(cls) = self.classifier.as_mut() {
                            let out = cls.forward(&mut tape, generated, &mut cls_mounted, true)?;
                            let _ = cls.mount_prototypes(&mut tape, &mut cls_mounted);
                            Some(tape.cross_entropy(out.logits, targets)?)
                        } else {
                            None
                        }
                    }
                    LossVariant::Cosine => {
                        if let Some(cls) = self.classifier.as_mut() {
                            let out = cls.forward(&mut tape, generated, &mut cls_mounted, true)?;
                            let protos = cls.mount_prototypes(&mut tape, &mut cls_mounted);
                            Some(cosine_loss_var(&mut tape, out.features, protos, targets)?)
                        } else {
                            None
                        }
                    }
                    LossVariant::LatentClassifier => {
                        let lc = self.latent_classifier.as_ref().ok_or_else(|| {
                            Error::Config("latent-classifier variant lost its head".into())
                        })?;
                        let logits = lc.forward(&mut tape, code_var, &mut latent_mounted)?;
                        Some(tape.cross_entropy(logits, targets)?)
                    }
                };
                if let Some(ce) = ce {
                    let weighted = tape.scale(ce, self.spec.gamma);
                    total = tape.add(percep, weighted)?;
                    ce_var = Some(ce);
                }
            }
        }

        let grads = tape.backward(total)?;

        // Codes: per-row Adam followed by immediate sphere re-projection.
        let code_grads = grads.get(code_var, &tape);
        let cg = code_grads.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut buf = Vec::with_capacity(self.codebook.dim());
        for (r, &row) in rows.iter().enumerate() {
            let current: Vec<f32> = self.codebook.codes().row(row).iter().copied().collect();
            let grad: Vec<f32> = cg.row(r).iter().copied().collect();
            self.code_opt.step_row(row, &current, &grad, &mut buf);
            self.codebook.store_projected(row, &buf)?;
        }

        let gen_grads = gen_mounted.grads(&tape, &grads);
        self.gen_opt.step(self.generator.params_mut(), &gen_grads)?;

        if ce_var.is_some() {
            match self.spec.variant {
                LossVariant::Standard | LossVariant::Cosine => {
                    if let Some(cls) = self.classifier.as_mut() {
                        let cls_grads = cls_mounted.grads(&tape, &grads);
                        self.cls_opt.step(cls.params_mut(), &cls_grads)?;
                    }
                }
                LossVariant::LatentClassifier => {
                    if let Some(lc) = self.latent_classifier.as_mut() {
                        let l_grads = latent_mounted.grads(&tape, &grads);
                        self.latent_opt.step(lc.params_mut(), &l_grads)?;
                    }
                }
            }
        }

        let record = LossRecord {
            epoch: self.epoch,
            step: self.history.len(),
            mode: if labels.is_some() { StepMode::Labeled } else { StepMode::Unlabeled },
            percep: tape.scalar(percep),
            ce: ce_var.map(|v| tape.scalar(v)),
            total: tape.scalar(total),
        };
        if record.ce.is_some() {
            self.ce_eval_count += n as u64;
        }
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs the epoch loop over `images` (row i of `images` pairs with
    /// codebook row i; labels come from the codebook). Writes periodic
    /// checkpoints into `checkpoint_dir` when configured.
    pub fn fit(&mut self, images: &Array4<f32>, checkpoint_dir: Option<&Path>) -> Result<()> {
        if images.dim().0 != self.codebook.len() {
            return Err(Error::Config(format!(
                "{} images for a codebook of {} codes",
                images.dim().0,
                self.codebook.len()
            )));
        }
        let labeled: Vec<usize> = (0..self.codebook.len())
            .filter(|&i| self.codebook.label(i).unwrap().is_some())
            .collect();
        let unlabeled: Vec<usize> = (0..self.codebook.len())
            .filter(|&i| self.codebook.label(i).unwrap().is_none())
            .collect();

        // Target taps are constant across the run; extract once.
        let mut taps_cache: Vec<Vec<Arr>> = Vec::with_capacity(self.codebook.len());
        for i in 0..self.codebook.len() {
            let img = images.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
            taps_cache.push(crate::loss::extract_target_taps(
                &self.extractor,
                &img.into_dyn(),
            )?);
        }

        while self.epoch < self.config.epochs {
            for _ in 0..self.config.oversample_factor {
                self.run_pass(&labeled, &taps_cache, true)?;
            }
            if self.config.transductive && !unlabeled.is_empty() {
                for _ in 0..self.config.oversample_factor {
                    self.run_pass(&unlabeled, &taps_cache, false)?;
                }
            }
            self.epoch += 1;
            let deviation = self.codebook.max_norm_deviation();
            if deviation >= 1e-5 {
                return Err(Error::Numerical(format!(
                    "codebook left the unit sphere: deviation {deviation}"
                )));
            }
            if let Some(dir) = checkpoint_dir {
                if self.config.checkpoint_every > 0
                    && self.epoch % self.config.checkpoint_every == 0
                {
                    self.save_checkpoint(&dir.join(format!("checkpoint_{:05}.bin", self.epoch)))?;
                }
            }
        }
        Ok(())
    }

    fn run_pass(
        &mut self,
        rows: &[usize],
        taps_cache: &[Vec<Arr>],
        labeled: bool,
    ) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let mut order = rows.to_vec();
        self.order_rng.shuffle(&mut order);
        for chunk in order.chunks(self.config.batch_size) {
            let taps = stack_taps(taps_cache, chunk);
            let labels = if labeled {
                let mut ls = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    ls.push(self.codebook.label(i)?.ok_or_else(|| {
                        Error::InvalidArgument(format!("labeled pass hit unlabeled index {i}"))
                    })?);
                }
                Some(ls)
            } else {
                None
            };
            self.step_core(chunk, &taps, labels.as_deref())?;
        }
        Ok(())
    }

    /// Serializes the complete training state: codebook, parameters,
    /// optimizer moments, stream positions, epoch, spec, config and the
    /// extractor's identity.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        ar.put_str("config", &serde_json::to_string(&self.config).unwrap());
        ar.put_str("spec", &serde_json::to_string(&self.spec).unwrap());
        ar.put_u64("epoch", self.epoch as u64);
        ar.put_u64("ce_eval_count", self.ce_eval_count);
        self.codebook.to_archive(&mut ar, "cb.");

        ar.put_str("gen.config", &serde_json::to_string(self.generator.config()).unwrap());
        let mut gen = self.generator.clone();
        for (i, p) in gen.params_mut().into_iter().enumerate() {
            ar.put_f32_array(&format!("gen.p{i}"), p);
        }

        if let Some(cls) = &self.classifier {
            ar.put_str("cls.config", &serde_json::to_string(cls.config()).unwrap());
            let mut cls = cls.clone();
            for (i, p) in cls.params_mut().into_iter().enumerate() {
                ar.put_f32_array(&format!("cls.p{i}"), p);
            }
            for (i, bn) in cls.batch_norms_mut().into_iter().enumerate() {
                ar.put_f32_array(
                    &format!("cls.bn{i}.mean"),
                    &ArrayD::from_shape_vec(IxDyn(&[bn.running_mean.len()]), bn.running_mean.clone())
                        .unwrap(),
                );
                ar.put_f32_array(
                    &format!("cls.bn{i}.var"),
                    &ArrayD::from_shape_vec(IxDyn(&[bn.running_var.len()]), bn.running_var.clone())
                        .unwrap(),
                );
            }
        }
        if let Some(lc) = &self.latent_classifier {
            ar.put_str("lcls.dims", &serde_json::to_string(&lc.dims()).unwrap());
            let mut lc = lc.clone();
            for (i, p) in lc.params_mut().into_iter().enumerate() {
                ar.put_f32_array(&format!("lcls.p{i}"), p);
            }
        }

        self.code_opt.to_archive(&mut ar, "opt.code.");
        self.gen_opt.to_archive(&mut ar, "opt.gen.");
        self.cls_opt.to_archive(&mut ar, "opt.cls.");
        self.latent_opt.to_archive(&mut ar, "opt.lcls.");

        ar.put_u128("rng.noise", self.noise_rng.word_pos());
        ar.put_u128("rng.order", self.order_rng.word_pos());

        ar.put_str("fe.source", &serde_json::to_string(&self.extractor_source).unwrap());
        ar.put_str("fe.hash", self.extractor.identity_hash());

        ar.put_str("history", &serde_json::to_string(&self.history).unwrap());
        ar.save(path)
    }

    /// Restores a checkpoint saved by [`TrainState::save_checkpoint`].
    /// The extractor is rebuilt from its recorded source and its content
    /// hash verified.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ar = Archive::load(path)?;
        let bad_json = |what: &str| Error::Integrity(format!("checkpoint section '{what}'"));
        let config: TrainConfig =
            serde_json::from_str(&ar.get_str("config")?).map_err(|_| bad_json("config"))?;
        let spec: LossSpec =
            serde_json::from_str(&ar.get_str("spec")?).map_err(|_| bad_json("spec"))?;
        let epoch = ar.get_u64("epoch")? as usize;
        let ce_eval_count = ar.get_u64("ce_eval_count")?;
        let codebook = LatentCodebook::from_archive(&ar, "cb.")?;

        let gen_config: crate::models::GeneratorConfig =
            serde_json::from_str(&ar.get_str("gen.config")?).map_err(|_| bad_json("gen.config"))?;
        let mut generator = GeneratorState::new(gen_config, 0)?;
        for (i, p) in generator.params_mut().into_iter().enumerate() {
            *p = ar.get_f32_array(&format!("gen.p{i}"))?;
        }

        let classifier = if ar.has("cls.config") {
            let cls_config: crate::models::ClassifierConfig =
                serde_json::from_str(&ar.get_str("cls.config")?)
                    .map_err(|_| bad_json("cls.config"))?;
            let mut cls = ClassifierState::new(cls_config, 0)?;
            for (i, p) in cls.params_mut().into_iter().enumerate() {
                *p = ar.get_f32_array(&format!("cls.p{i}"))?;
            }
            for (i, bn) in cls.batch_norms_mut().into_iter().enumerate() {
                bn.running_mean = ar
                    .get_f32_array(&format!("cls.bn{i}.mean"))?
                    .iter()
                    .copied()
                    .collect();
                bn.running_var = ar
                    .get_f32_array(&format!("cls.bn{i}.var"))?
                    .iter()
                    .copied()
                    .collect();
            }
            Some(cls)
        } else {
            None
        };

        let latent_classifier = if ar.has("lcls.dims") {
            let dims: (usize, usize, usize) =
                serde_json::from_str(&ar.get_str("lcls.dims")?).map_err(|_| bad_json("lcls"))?;
            let mut lc = LatentClassifier::new(dims.0, dims.1, dims.2, 0)?;
            for (i, p) in lc.params_mut().into_iter().enumerate() {
                *p = ar.get_f32_array(&format!("lcls.p{i}"))?;
            }
            Some(lc)
        } else {
            None
        };

        let extractor_source: ExtractorSource =
            serde_json::from_str(&ar.get_str("fe.source")?).map_err(|_| bad_json("fe.source"))?;
        let extractor = extractor_source.build()?;
        let recorded_hash = ar.get_str("fe.hash")?;
        if extractor.identity_hash() != recorded_hash {
            return Err(Error::Integrity(format!(
                "extractor hash mismatch: checkpoint {recorded_hash}, rebuilt {}",
                extractor.identity_hash()
            )));
        }

        let code_opt = RowAdam::from_archive(&ar, "opt.code.", config.code_lr)?;
        let gen_opt = Adam::from_archive(&ar, "opt.gen.", config.gen_lr)?;
        let cls_opt = Adam::from_archive(&ar, "opt.cls.", config.cls_lr)?;
        let latent_opt = Adam::from_archive(&ar, "opt.lcls.", config.cls_lr)?;

        let mut noise_rng = Stream::new(config.seed, "train-noise");
        noise_rng.set_word_pos(ar.get_u128("rng.noise")?);
        let mut order_rng = Stream::new(config.seed, "train-order");
        order_rng.set_word_pos(ar.get_u128("rng.order")?);

        let history: Vec<LossRecord> =
            serde_json::from_str(&ar.get_str("history")?).map_err(|_| bad_json("history"))?;

        Ok(TrainState {
            codebook,
            generator,
            classifier,
            latent_classifier,
            extractor,
            extractor_source,
            spec,
            config,
            epoch,
            history,
            ce_eval_count,
            code_opt,
            gen_opt,
            cls_opt,
            latent_opt,
            noise_rng,
            order_rng,
        })
    }

    /// Mean perceptual loss of the records in the given epoch.
    pub fn epoch_perceptual_mean(&self, epoch: usize) -> Option<f64> {
        let (mut sum, mut count) = (0.0f64, 0usize);
        for r in self.history.iter().filter(|r| r.epoch == epoch) {
            sum += r.percep as f64;
            count += 1;
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Stacks cached per-image taps (leading dim 1) into per-batch taps.
fn stack_taps(cache: &[Vec<Arr>], rows: &[usize]) -> Vec<Arr> {
    let tap_count = cache[rows[0]].len();
    (0..tap_count)
        .map(|t| {
            let views: Vec<_> = rows
                .iter()
                .map(|&i| cache[i][t].view())
                .collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        })
        .collect()
}
