//! The auxiliary classifier menu: a weak 4-conv CNN plus stronger
//! architectures for the weak-vs-strong sweep. All variants emit logits and
//! penultimate pooled features; a learned per-class prototype table backs
//! the cosine-loss variant.

use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::Mounted;
use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Architecture selector. The small CNN is the default: in the low-sample
/// regime a weak classifier regularizes the latent space without
/// overpowering the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierArch {
    SmallCnn4Conv,
    Vgg19,
    Resnet50,
    WideResnet28,
}

impl ClassifierArch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small-cnn-4conv" => Ok(Self::SmallCnn4Conv),
            "vgg19" => Ok(Self::Vgg19),
            "resnet50" => Ok(Self::Resnet50),
            "wide-resnet-28" => Ok(Self::WideResnet28),
            other => Err(Error::Config(format!("unknown classifier arch '{other}'"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::SmallCnn4Conv => "small-cnn-4conv",
            Self::Vgg19 => "vgg19",
            Self::Resnet50 => "resnet50",
            Self::WideResnet28 => "wide-resnet-28",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Base channel width. 32 gives the paper-style small CNN; the strong
    /// architectures scale from it.
    pub width: usize,
}

impl ClassifierConfig {
    pub fn small(num_classes: usize) -> Self {
        ClassifierConfig {
            arch: ClassifierArch::SmallCnn4Conv,
            num_classes,
            in_channels: 3,
            width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 || self.width == 0 {
            return Err(Error::Config("classifier dims must be positive".into()));
        }
        Ok(())
    }
}

/// One residual basic block: conv-bn-relu-conv-bn plus identity (or a 1x1
/// projection when shape changes), relu after the sum.
#[derive(Debug, Clone)]
struct BasicBlock {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, s: &mut Stream) -> Self {
        let proj = if stride != 1 || cin != cout {
            Some((Conv2d::he(cin, cout, 1, stride, 0, s), BatchNorm2d::new(cout)))
        } else {
            None
        };
        BasicBlock {
            c1: Conv2d::he(cin, cout, 3, stride, 1, s),
            b1: BatchNorm2d::new(cout),
            c2: Conv2d::he(cout, cout, 3, 1, 1, s),
            b2: BatchNorm2d::new(cout),
            proj,
        }
    }

    fn forward(&mut self, t: &mut Tape, x: Var, m: &mut Mounted, training: bool) -> Result<Var> {
        let mut h = self.c1.forward(t, x, m)?;
        h = self.b1.forward(t, h, m, training)?;
        h = t.relu(h);
        h = self.c2.forward(t, h, m)?;
        h = self.b2.forward(t, h, m, training)?;
        let skip = match &mut self.proj {
            Some((conv, bn)) => {
                let p = conv.forward(t, x, m)?;
                bn.forward(t, p, m, training)?
            }
            None => x,
        };
        let sum = t.add(h, skip)?;
        Ok(t.relu(sum))
    }

    fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut out = self.c1.params_mut();
        out.extend(self.b1.params_mut());
        out.extend(self.c2.params_mut());
        out.extend(self.b2.params_mut());
        if let Some((conv, bn)) = &mut self.proj {
            out.extend(conv.params_mut());
            out.extend(bn.params_mut());
        }
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = vec![&mut self.b1, &mut self.b2];
        if let Some((_, bn)) = &mut self.proj {
            out.push(bn);
        }
        out
    }
}

/// Bottleneck residual block (1x1 reduce, 3x3, 1x1 expand by 4).
#[derive(Debug, Clone)]
struct Bottleneck {
    c1: Conv2d,
    b1: BatchNorm2d,
    c2: Conv2d,
    b2: BatchNorm2d,
    c3: Conv2d,
    b3: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    const EXPANSION: usize = 4;

    fn new(cin: usize, mid: usize, stride: usize, s: &mut Stream) -> Self {
        let cout = mid * Self::EXPANSION;
        let proj = if stride != 1 || cin != cout {
            Some((Conv2d::he(cin, cout, 1, stride, 0, s), BatchNorm2d::new(cout)))
        } else {
            None
        };
        Bottleneck {
            c1: Conv2d::he(cin, mid, 1, 1, 0, s),
            b1: BatchNorm2d::new(mid),
            c2: Conv2d::he(mid, mid, 3, stride, 1, s),
            b2: BatchNorm2d::new(mid),
            c3: Conv2d::he(mid, cout, 1, 1, 0, s),
            b3: BatchNorm2d::new(cout),
            proj,
        }
    }

    fn forward(&mut self, t: &mut Tape, x: Var, m: &mut Mounted, training: bool) -> Result<Var> {
        let mut h = self.c1.forward(t, x, m)?;
        h = self.b1.forward(t, h, m, training)?;
        h = t.relu(h);
        h = self.c2.forward(t, h, m)?;
        h = self.b2.forward(t, h, m, training)?;
        h = t.relu(h);
        h = self.c3.forward(t, h, m)?;
        h = self.b3.forward(t, h, m, training)?;
        let skip = match &mut self.proj {
            Some((conv, bn)) => {
                let p = conv.forward(t, x, m)?;
                bn.forward(t, p, m, training)?
            }
            None => x,
        };
        let sum = t.add(h, skip)?;
        Ok(t.relu(sum))
    }

    fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut out = self.c1.params_mut();
        out.extend(self.b1.params_mut());
        out.extend(self.c2.params_mut());
        out.extend(self.b2.params_mut());
        out.extend(self.c3.params_mut());
        out.extend(self.b3.params_mut());
        if let Some((conv, bn)) = &mut self.proj {
            out.extend(conv.params_mut());
            out.extend(bn.params_mut());
        }
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = vec![&mut self.b1, &mut self.b2, &mut self.b3];
        if let Some((_, bn)) = &mut self.proj {
            out.push(bn);
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Body {
    /// conv-relu-pool x3, conv-relu, global average pool.
    SmallCnn { convs: Vec<Conv2d> },
    /// VGG-19 conv stack: blocks of (2,2,4,4,4) convolutions.
    Vgg { convs: Vec<Vec<Conv2d>> },
    /// Stem plus bottleneck stages (3,4,6,3).
    Resnet { stem: Conv2d, stem_bn: BatchNorm2d, blocks: Vec<Bottleneck> },
    /// Stem plus 3 groups of 4 basic blocks (depth 28).
    WideResnet { stem: Conv2d, blocks: Vec<BasicBlock> },
}

/// Classifier parameters, architecture id and the prototype table used by
/// the cosine-loss variant.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    config: ClassifierConfig,
    body: Body,
    head: Linear,
    prototypes: Arr,
    feature_dim: usize,
}

/// Forward outputs: pooled penultimate features and class logits.
pub struct ClassifierOutputs {
    pub features: Var,
    pub logits: Var,
}

impl ClassifierState {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Stream::new(seed, "cls-init");
        let w = config.width;
        let cin = config.in_channels;
        let (body, feature_dim) = match config.arch {
            ClassifierArch::SmallCnn4Conv => {
                let convs = vec![
                    Conv2d::he(cin, w, 3, 1, 1, &mut s),
                    Conv2d::he(w, 2 * w, 3, 1, 1, &mut s),
                    Conv2d::he(2 * w, 4 * w, 3, 1, 1, &mut s),
                    Conv2d::he(4 * w, 8 * w, 3, 1, 1, &mut s),
                ];
                (Body::SmallCnn { convs }, 8 * w)
            }
            ClassifierArch::Vgg19 => {
                let plan: [(usize, usize); 5] =
                    [(2, w), (2, 2 * w), (4, 4 * w), (4, 8 * w), (4, 8 * w)];
                let mut blocks = Vec::new();
                let mut prev = cin;
                for (count, ch) in plan {
                    let mut block = Vec::new();
                    for _ in 0..count {
                        block.push(Conv2d::he(prev, ch, 3, 1, 1, &mut s));
                        prev = ch;
                    }
                    blocks.push(block);
                }
                (Body::Vgg { convs: blocks }, 8 * w)
            }
            ClassifierArch::Resnet50 => {
                let stem = Conv2d::he(cin, w, 3, 1, 1, &mut s);
                let stem_bn = BatchNorm2d::new(w);
                let stage_blocks = [3usize, 4, 6, 3];
                let mut blocks = Vec::new();
                let mut prev = w;
                for (si, &count) in stage_blocks.iter().enumerate() {
                    let mid = w << si;
                    for b in 0..count {
                        let stride = if si > 0 && b == 0 { 2 } else { 1 };
                        blocks.push(Bottleneck::new(prev, mid, stride, &mut s));
                        prev = mid * Bottleneck::EXPANSION;
                    }
                }
                (Body::Resnet { stem, stem_bn, blocks }, prev)
            }
            ClassifierArch::WideResnet28 => {
                // depth 28 = 6n + 4 with n = 4 basic blocks per group.
                let stem = Conv2d::he(cin, 16, 3, 1, 1, &mut s);
                let widths = [w, 2 * w, 4 * w];
                let mut blocks = Vec::new();
                let mut prev = 16;
                for (gi, &gw) in widths.iter().enumerate() {
                    for b in 0..4 {
                        let stride = if gi > 0 && b == 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(prev, gw, stride, &mut s));
                        prev = gw;
                    }
                }
                (Body::WideResnet { stem, blocks }, prev)
            }
        };
        let head = Linear::gaussian_init(feature_dim, config.num_classes, 0.01, &mut s);
        let prototypes = {
            let n = feature_dim * config.num_classes;
            let data: Vec<f32> = (0..n).map(|_| s.next_gaussian() * 0.1).collect();
            ArrayD::from_shape_vec(IxDyn(&[config.num_classes, feature_dim]), data).unwrap()
        };
        Ok(ClassifierState { config, body, head, prototypes, feature_dim })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Tape node for the prototype table (mounted by `forward`).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        images: Var,
        mounted: &mut Mounted,
        training: bool,
    ) -> Result<ClassifierOutputs> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "classifier expects (N, {}, H, W), got {shape:?}",
                self.config.in_channels
            )));
        }
        let mut h = images;
        match &mut self.body {
            Body::SmallCnn { convs } => {
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(tape, h, mounted)?;
                    h = tape.relu(h);
                    if i < 3 && tape.shape(h)[2] >= 2 && tape.shape(h)[2] % 2 == 0 {
                        h = tape.max_pool2(h)?;
                    }
                }
            }
            Body::Vgg { convs } => {
                for block in convs.iter() {
                    for conv in block {
                        h = conv.forward(tape, h, mounted)?;
                        h = tape.relu(h);
                    }
                    if tape.shape(h)[2] >= 2 && tape.shape(h)[2] % 2 == 0 {
                        h = tape.max_pool2(h)?;
                    }
                }
            }
            Body::Resnet { stem, stem_bn, blocks } => {
                h = stem.forward(tape, h, mounted)?;
                h = stem_bn.forward(tape, h, mounted, training)?;
                h = tape.relu(h);
                for b in blocks.iter_mut() {
                    h = b.forward(tape, h, mounted, training)?;
                }
            }
            Body::WideResnet { stem, blocks } => {
                h = stem.forward(tape, h, mounted)?;
                h = tape.relu(h);
                for b in blocks.iter_mut() {
                    h = b.forward(tape, h, mounted, training)?;
                }
            }
        }
        let features = tape.global_avg_pool(h)?;
        let logits = self.head.forward(tape, features, mounted)?;
        Ok(ClassifierOutputs { features, logits })
    }

    /// Mounts the prototype table for the cosine-loss variant.
    pub fn mount_prototypes(&self, tape: &mut Tape, mounted: &mut Mounted) -> Var {
        let v = tape.leaf(self.prototypes.clone());
        mounted.vars.push(v);
        v
    }

    /// Inference: logits for a plain image batch.
    pub fn predict(&mut self, images: &Arr) -> Result<Arr> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let mut mounted = Mounted::new();
        let out = self.forward(&mut tape, x, &mut mounted, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// All trainable parameters. Order is stable across calls: body, head,
    /// prototypes. `forward` + `mount_prototypes` mounts in the same order.
    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        let mut out = match &mut self.body {
            Body::SmallCnn { convs } => {
                convs.iter_mut().flat_map(|c| c.params_mut()).collect::<Vec<_>>()
            }
            Body::Vgg { convs } => convs
                .iter_mut()
                .flat_map(|b| b.iter_mut().flat_map(|c| c.params_mut()))
                .collect(),
            Body::Resnet { stem, stem_bn, blocks } => {
                let mut v = stem.params_mut();
                v.extend(stem_bn.params_mut());
                v.extend(blocks.iter_mut().flat_map(|b| b.params_mut()));
                v
            }
            Body::WideResnet { stem, blocks } => {
                let mut v = stem.params_mut();
                v.extend(blocks.iter_mut().flat_map(|b| b.params_mut()));
                v
            }
        };
        out.extend(self.head.params_mut());
        out.push(&mut self.prototypes);
        out
    }

    pub fn param_count(&self) -> usize {
        let mut this = self.clone();
        this.params_mut().iter().map(|p| p.len()).sum()
    }

    /// Running-statistic holders, in a stable order, for checkpointing.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        match &mut self.body {
            Body::SmallCnn { .. } | Body::Vgg { .. } => Vec::new(),
            Body::Resnet { stem_bn, blocks, .. } => {
                let mut out = vec![stem_bn];
                out.extend(blocks.iter_mut().flat_map(|b| b.batch_norms_mut()));
                out
            }
            Body::WideResnet { blocks, .. } => {
                blocks.iter_mut().flat_map(|b| b.batch_norms_mut()).collect()
            }
        }
    }
}

/// Three-layer MLP applied directly to latent codes: an ablation that
/// optimizes the classification loss in latent space instead of image
/// space.
#[derive(Debug, Clone)]
pub struct LatentClassifier {
    layers: Vec<Linear>,
    dims: (usize, usize, usize),
}

impl LatentClassifier {
    pub fn new(latent_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || hidden == 0 || num_classes == 0 {
            return Err(Error::Config("latent classifier dims must be positive".into()));
        }
        let mut s = Stream::new(seed, "latent-cls-init");
        Ok(LatentClassifier {
            layers: vec![
                Linear::he(latent_dim, hidden, &mut s),
                Linear::he(hidden, hidden, &mut s),
                Linear::gaussian_init(hidden, num_classes, 0.01, &mut s),
            ],
            dims: (latent_dim, hidden, num_classes),
        })
    }

    /// `(latent_dim, hidden, num_classes)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Number of affine layers; fixed at 3 by construction.
    pub fn affine_layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Logits from a `(N, d)` code batch node, ReLU between layers.
    pub fn forward(&self, tape: &mut Tape, codes: Var, mounted: &mut Mounted) -> Result<Var> {
        let mut h = codes;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h, mounted)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arr> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_batch(n: usize, c: usize, hw: usize) -> Arr {
        let len = n * c * hw * hw;
        let data: Vec<f32> = (0..len).map(|i| ((i * 37 % 100) as f32 / 50.0) - 1.0).collect();
        ArrayD::from_shape_vec(IxDyn(&[n, c, hw, hw]), data).unwrap()
    }

    #[test]
    fn arch_ids_roundtrip() {
        for arch in [
            ClassifierArch::SmallCnn4Conv,
            ClassifierArch::Vgg19,
            ClassifierArch::Resnet50,
            ClassifierArch::WideResnet28,
        ] {
            assert_eq!(ClassifierArch::parse(arch.id()).unwrap(), arch);
        }
        assert!(ClassifierArch::parse("alexnet").is_err());
    }

    #[test]
    fn small_cnn_emits_num_classes_logits() {
        let mut c = ClassifierState::new(ClassifierConfig::small(7), 3).unwrap();
        let logits = c.predict(&image_batch(2, 3, 16)).unwrap();
        assert_eq!(logits.shape(), &[2, 7]);
    }

    #[test]
    fn strong_archs_forward_at_reduced_width() {
        for arch in [ClassifierArch::Vgg19, ClassifierArch::Resnet50, ClassifierArch::WideResnet28] {
            let cfg = ClassifierConfig { arch, num_classes: 4, in_channels: 3, width: 4 };
            let mut c = ClassifierState::new(cfg, 1).unwrap();
            let logits = c.predict(&image_batch(2, 3, 32)).unwrap();
            assert_eq!(logits.shape(), &[2, 4], "{}", arch.id());
        }
    }

    #[test]
    fn param_order_is_stable_and_matches_mounted_vars() {
        let cfg = ClassifierConfig::small(3);
        let mut c = ClassifierState::new(cfg, 9).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(image_batch(1, 3, 8));
        let mut mounted = Mounted::new();
        let _ = c.forward(&mut tape, x, &mut mounted, true).unwrap();
        let _ = c.mount_prototypes(&mut tape, &mut mounted);
        let shapes_mounted: Vec<Vec<usize>> = mounted
            .vars
            .iter()
            .map(|v| tape.shape(*v).to_vec())
            .collect();
        let shapes_params: Vec<Vec<usize>> =
            c.params_mut().iter().map(|p| p.shape().to_vec()).collect();
        assert_eq!(shapes_mounted, shapes_params);
    }

    #[test]
    fn latent_classifier_has_three_affine_layers() {
        let lc = LatentClassifier::new(16, 32, 5, 2).unwrap();
        assert_eq!(lc.affine_layer_count(), 3);
    }
}
