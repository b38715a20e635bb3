//! Backbone zoo with block-level truncation, plus the pretext and probe heads.
//!
//! Block boundaries:
//!
//! | arch        | block 1              | blocks 2..=5                          |
//! |-------------|----------------------|---------------------------------------|
//! | VGG16       | conv group + maxpool | one conv group + maxpool each         |
//! | NIN         | mlpconv + maxpool    | mlpconv + avgpool, mlpconv (3 blocks) |
//! | ResNet50    | 3x3 stem             | bottleneck stages [3, 4, 6, 3]        |
//! | ResNet152V2 | 3x3 stem             | pre-activation stages [3, 8, 36, 3]   |
//! | DenseNet201 | 3x3 stem             | dense blocks [6, 12, 48, 32] + transition |
//!
//! Stems are the stride-1 CIFAR variants so that 32x32 inputs survive all
//! five blocks. Every backbone ends in global average pooling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Conv2d, ConvGeometry, DenseConcat, GlobalAvgPool, Layer, Linear, NamedSlots, Pool2d, PoolKind, Relu,
    Residual, Scalar, Sequential, Slot, Tensor,
};

pub const PROBE_HIDDEN: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vgg16,
    Nin,
    Resnet50,
    Resnet152v2,
    Densenet201,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Vgg16, Arch::Nin, Arch::Resnet50, Arch::Resnet152v2, Arch::Densenet201];

    pub fn max_blocks(self) -> usize {
        match self {
            Arch::Nin => 3,
            _ => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Vgg16 => "vgg16",
            Arch::Nin => "nin",
            Arch::Resnet50 => "resnet50",
            Arch::Resnet152v2 => "resnet152v2",
            Arch::Densenet201 => "densenet201",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arch::Vgg16 => "VGG16",
            Arch::Nin => "NIN",
            Arch::Resnet50 => "ResNet50",
            Arch::Resnet152v2 => "ResNet152V2",
            Arch::Densenet201 => "DenseNet201",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match norm.as_str() {
            "vgg16" | "vgg" => Ok(Arch::Vgg16),
            "nin" => Ok(Arch::Nin),
            "resnet50" => Ok(Arch::Resnet50),
            "resnet152v2" => Ok(Arch::Resnet152v2),
            "densenet201" | "densenet" => Ok(Arch::Densenet201),
            _ => Err(Error::config(format!("unknown architecture '{s}'"))),
        }
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// Architecture identity and truncation depth.
///
/// `width_divisor` divides every channel count; 1 is the canonical network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub arch: Arch,
    pub num_blocks: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub width_divisor: usize,
}

/// Output of one block on a 32x32 input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub block: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];

impl BackboneSpec {
    pub fn new(arch: Arch, num_blocks: usize) -> Result<Self> {
        let spec = Self {
            arch,
            num_blocks,
            width_divisor: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Result<Self> {
        self.width_divisor = divisor;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.num_blocks > self.arch.max_blocks() {
            return Err(Error::config(format!(
                "{} has blocks 1..={}, got {}",
                self.arch.label(),
                self.arch.max_blocks(),
                self.num_blocks
            )));
        }
        if self.width_divisor == 0 || !self.width_divisor.is_power_of_two() || self.width_divisor > 16 {
            return Err(Error::config("width divisor must be one of 1, 2, 4, 8, 16"));
        }
        Ok(())
    }

    /// Row label in the style "VGG16 - 2".
    pub fn label(&self) -> String {
        if self.width_divisor == 1 {
            format!("{} - {}", self.arch.label(), self.num_blocks)
        } else {
            format!("{} - {} (1/{})", self.arch.label(), self.num_blocks, self.width_divisor)
        }
    }

    fn ch(&self, c: usize) -> usize {
        (c / self.width_divisor).max(1)
    }

    /// Per-block output shapes, derived from the block definitions alone.
    pub fn shape_trace(&self) -> Vec<BlockShape> {
        let mut out = Vec::new();
        let mut side = 32usize;
        let mut push = |block: usize, channels: usize, side: usize| {
            out.push(BlockShape {
                block,
                channels,
                height: side,
                width: side,
            })
        };
        match self.arch {
            Arch::Vgg16 => {
                for (b, &c) in VGG_WIDTHS.iter().enumerate().take(self.num_blocks) {
                    side /= 2;
                    push(b + 1, self.ch(c), side);
                }
            }
            Arch::Nin => {
                for (b, widths) in NIN_WIDTHS.iter().enumerate().take(self.num_blocks) {
                    if b < 2 {
                        side = (side + 1) / 2;
                    }
                    push(b + 1, self.ch(widths[2]), side);
                }
            }
            Arch::Resnet50 | Arch::Resnet152v2 => {
                push(1, self.ch(64), side);
                for stage in 0..self.num_blocks - 1 {
                    if stage > 0 {
                        side /= 2;
                    }
                    push(stage + 2, 4 * self.ch(64 << stage), side);
                }
            }
            Arch::Densenet201 => {
                let growth = self.ch(DENSE_GROWTH);
                let mut c = self.ch(64);
                push(1, c, side);
                for (i, &layers) in DENSE_LAYERS.iter().enumerate().take(self.num_blocks - 1) {
                    c += layers * growth;
                    if i < DENSE_LAYERS.len() - 1 {
                        c /= 2;
                        side /= 2;
                    }
                    push(i + 2, c, side);
                }
            }
        }
        out
    }

    /// Width of the pooled feature vector.
    pub fn feature_width(&self) -> usize {
        self.shape_trace().last().map_or(0, |s| s.channels)
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.arch, self.num_blocks)?;
        if self.width_divisor != 1 {
            write!(f, "/w{}", self.width_divisor)?;
        }
        Ok(())
    }
}

impl FromStr for BackboneSpec {
    type Err = Error;

    /// Parses `arch-blocks` with an optional `/wN` width divisor,
    /// e.g. `vgg16-2` or `vgg16-2/w4`.
    fn from_str(s: &str) -> Result<Self> {
        let (body, divisor) = match s.split_once("/w") {
            Some((b, d)) => (
                b,
                d.parse::<usize>()
                    .map_err(|_| Error::config(format!("bad width divisor in '{s}'")))?,
            ),
            None => (s, 1),
        };
        let (arch, blocks) = body
            .rsplit_once('-')
            .ok_or_else(|| Error::config(format!("expected 'arch-blocks', got '{s}'")))?;
        let blocks = blocks
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("bad block count in '{s}'")))?;
        BackboneSpec::new(arch.trim().parse()?, blocks)?.with_width_divisor(divisor)
    }
}

const VGG_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const VGG_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
const NIN_WIDTHS: [[usize; 3]; 3] = [[192, 160, 96], [192, 192, 192], [192, 192, 192]];
const NIN_KERNELS: [usize; 3] = [5, 5, 3];
const RESNET50_UNITS: [usize; 4] = [3, 4, 6, 3];
const RESNET152_UNITS: [usize; 4] = [3, 8, 36, 3];
const DENSE_LAYERS: [usize; 4] = [6, 12, 48, 32];
const DENSE_GROWTH: usize = 32;

fn conv<T: Scalar>(cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Conv2d<T> {
    Conv2d::new(
        cin,
        cout,
        ConvGeometry {
            kernel,
            stride,
            pad: kernel / 2,
        },
        bias,
    )
}

fn conv_bn_relu<T: Scalar>(seq: &mut Sequential<T>, tag: &str, cin: usize, cout: usize, kernel: usize, stride: usize) {
    seq.push(format!("conv{tag}"), conv(cin, cout, kernel, stride, false));
    seq.push(format!("bn{tag}"), BatchNorm::new(cout));
    seq.push(format!("relu{tag}"), Relu::new());
}

fn bn_relu<T: Scalar>(c: usize) -> Sequential<T> {
    Sequential::new().with("bn", BatchNorm::new(c)).with("relu", Relu::new())
}

/// Truncated backbone followed by global average pooling.
pub struct Backbone<T> {
    spec: BackboneSpec,
    blocks: Sequential<T>,
    pool: GlobalAvgPool,
}

impl<T: Scalar> Backbone<T> {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_width(&self) -> usize {
        self.spec.feature_width()
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let h = self.blocks.forward(x, train);
        self.pool.forward(&h, train)
    }

    /// Spatial feature map before pooling.
    pub fn forward_map(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.blocks.forward(x, false)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let g = self.pool.backward(grad);
        self.blocks.backward(&g)
    }

    pub fn visit<'a>(&'a mut self, out: &mut NamedSlots<'a, T>) {
        self.blocks.visit("backbone", out);
    }
}

fn build_blocks<T: Scalar>(spec: &BackboneSpec) -> Sequential<T> {
    let mut blocks = Sequential::new();
    let ch = |c: usize| spec.ch(c);
    match spec.arch {
        Arch::Vgg16 => {
            let mut cin = 3;
            for b in 0..spec.num_blocks {
                let cout = ch(VGG_WIDTHS[b]);
                let mut block = Sequential::new();
                for i in 0..VGG_DEPTHS[b] {
                    conv_bn_relu(&mut block, &(i + 1).to_string(), cin, cout, 3, 1);
                    cin = cout;
                }
                block.push("pool", Pool2d::new(PoolKind::Max, 2, 2, 0));
                blocks.push(format!("block{}", b + 1), block);
            }
        }
        Arch::Nin => {
            let mut cin = 3;
            for b in 0..spec.num_blocks {
                let [w1, w2, w3] = NIN_WIDTHS[b].map(ch);
                let mut block = Sequential::new();
                conv_bn_relu(&mut block, "1", cin, w1, NIN_KERNELS[b], 1);
                conv_bn_relu(&mut block, "2", w1, w2, 1, 1);
                conv_bn_relu(&mut block, "3", w2, w3, 1, 1);
                match b {
                    0 => block.push("pool", Pool2d::new(PoolKind::Max, 3, 2, 1)),
                    1 => block.push("pool", Pool2d::new(PoolKind::Average, 3, 2, 1)),
                    _ => &mut block,
                };
                cin = w3;
                blocks.push(format!("block{}", b + 1), block);
            }
        }
        Arch::Resnet50 | Arch::Resnet152v2 => {
            let v2 = spec.arch == Arch::Resnet152v2;
            let units = if v2 { RESNET152_UNITS } else { RESNET50_UNITS };
            let stem_c = ch(64);
            let mut stem = Sequential::new();
            if v2 {
                stem.push("conv1", conv(3, stem_c, 3, 1, true));
            } else {
                conv_bn_relu(&mut stem, "1", 3, stem_c, 3, 1);
            }
            blocks.push("block1", stem);
            let mut cin = stem_c;
            for stage in 0..spec.num_blocks - 1 {
                let mid = ch(64 << stage);
                let cout = 4 * mid;
                let mut block = Sequential::new();
                for u in 0..units[stage] {
                    let stride = if u == 0 && stage > 0 { 2 } else { 1 };
                    let unit = if v2 {
                        preact_bottleneck(cin, mid, cout, stride)
                    } else {
                        bottleneck(cin, mid, cout, stride)
                    };
                    block.push(format!("unit{}", u + 1), unit);
                    cin = cout;
                }
                if v2 && stage == RESNET152_UNITS.len() - 1 {
                    block.push("post", bn_relu(cout));
                }
                blocks.push(format!("block{}", stage + 2), block);
            }
        }
        Arch::Densenet201 => {
            let growth = ch(DENSE_GROWTH);
            let mut c = ch(64);
            let mut stem = Sequential::new();
            conv_bn_relu(&mut stem, "1", 3, c, 3, 1);
            blocks.push("block1", stem);
            for (i, &layers) in DENSE_LAYERS.iter().enumerate().take(spec.num_blocks - 1) {
                let mut block = Sequential::new();
                for l in 0..layers {
                    let mut body = Sequential::new();
                    body.push("bn1", BatchNorm::new(c));
                    body.push("relu1", Relu::new());
                    body.push("conv1", conv(c, 4 * growth, 1, 1, false));
                    body.push("bn2", BatchNorm::new(4 * growth));
                    body.push("relu2", Relu::new());
                    body.push("conv2", conv(4 * growth, growth, 3, 1, false));
                    block.push(format!("layer{}", l + 1), DenseConcat::new(body));
                    c += growth;
                }
                if i < DENSE_LAYERS.len() - 1 {
                    let mut transition = Sequential::new();
                    transition.push("bn", BatchNorm::new(c));
                    transition.push("relu", Relu::new());
                    transition.push("conv", conv(c, c / 2, 1, 1, false));
                    transition.push("pool", Pool2d::new(PoolKind::Average, 2, 2, 0));
                    block.push("transition", transition);
                    c /= 2;
                } else {
                    block.push("post", bn_relu(c));
                }
                blocks.push(format!("block{}", i + 2), block);
            }
        }
    }
    blocks
}

fn bottleneck<T: Scalar>(cin: usize, mid: usize, cout: usize, stride: usize) -> Residual<T> {
    let mut main = Sequential::new();
    conv_bn_relu(&mut main, "1", cin, mid, 1, 1);
    conv_bn_relu(&mut main, "2", mid, mid, 3, stride);
    main.push("conv3", conv(mid, cout, 1, 1, false));
    main.push("bn3", BatchNorm::new(cout));
    let projection = (stride != 1 || cin != cout).then(|| {
        Sequential::new()
            .with("conv", conv(cin, cout, 1, stride, false))
            .with("bn", BatchNorm::new(cout))
    });
    Residual::new(None, main, projection, true)
}

fn preact_bottleneck<T: Scalar>(cin: usize, mid: usize, cout: usize, stride: usize) -> Residual<T> {
    let mut main = Sequential::new();
    conv_bn_relu(&mut main, "1", cin, mid, 1, 1);
    conv_bn_relu(&mut main, "2", mid, mid, 3, stride);
    main.push("conv3", conv(mid, cout, 1, 1, true));
    let projection =
        (stride != 1 || cin != cout).then(|| Sequential::new().with("conv", conv(cin, cout, 1, stride, true)));
    Residual::new(Some(bn_relu(cin)), main, projection, false)
}

/// Seed for one named parameter, so a parameter's initial value depends
/// only on `(init_seed, name)` and not on which other layers exist.
fn param_seed(init_seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    crate::dataset::epoch_seed(init_seed, h as usize)
}

fn init_slots<T: Scalar>(slots: &mut NamedSlots<'_, T>, init_seed: u64) {
    for (name, slot) in slots.iter_mut() {
        let Slot::Param(p) = slot else { continue };
        if !name.ends_with(".weight") {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(init_seed, name));
        let shape = p.value.shape().to_vec();
        let data = p.value.data_mut();
        if name.starts_with("pretext.") {
            let normal = Normal::new(0.0, 0.01).unwrap();
            data.iter_mut().for_each(|v| *v = T::from_f64_lossy(normal.sample(&mut rng)));
        } else if shape.len() == 4 {
            // He normal on fan-in
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            data.iter_mut().for_each(|v| *v = T::from_f64_lossy(normal.sample(&mut rng)));
        } else {
            // Glorot uniform
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            data.iter_mut().for_each(|v| *v = T::from_f64_lossy(rng.random_range(-limit..limit)));
        }
    }
}

/// Builds the backbone truncated after `spec.num_blocks` blocks with
/// weights drawn deterministically from `init_seed`.
pub fn build_backbone<T: Scalar>(spec: BackboneSpec, init_seed: u64) -> Result<Backbone<T>> {
    spec.validate()?;
    let mut backbone = Backbone {
        spec,
        blocks: build_blocks(&spec),
        pool: GlobalAvgPool::new(),
    };
    let mut slots = Vec::new();
    backbone.visit(&mut slots);
    init_slots(&mut slots, init_seed);
    Ok(backbone)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadKind {
    /// One affine layer to K transform logits.
    Pretext { k: usize },
    /// Two 200-unit BN+ReLU hidden layers, then the class logits.
    Probe { classes: usize },
}

/// Backbone plus a classification head.
pub struct Model<T> {
    backbone: Backbone<T>,
    head: Sequential<T>,
    head_kind: HeadKind,
    backbone_trainable: bool,
}

pub fn attach_pretext_head<T: Scalar>(backbone: Backbone<T>, k: usize, init_seed: u64) -> Result<Model<T>> {
    if k < 2 {
        return Err(Error::invalid(format!("a pretext head needs K >= 2, got {k}")));
    }
    let f = backbone.feature_width();
    let head = Sequential::new().with("pretext", Linear::new(f, k));
    Model::assemble(backbone, head, HeadKind::Pretext { k }, init_seed)
}

pub fn attach_probe_head<T: Scalar>(backbone: Backbone<T>, classes: usize, init_seed: u64) -> Result<Model<T>> {
    if classes < 2 {
        return Err(Error::config(format!("a probe head needs at least 2 classes, got {classes}")));
    }
    let f = backbone.feature_width();
    let mut probe = Sequential::new();
    probe.push("fc1", Linear::new(f, PROBE_HIDDEN));
    probe.push("bn1", BatchNorm::new(PROBE_HIDDEN));
    probe.push("relu1", Relu::new());
    probe.push("fc2", Linear::new(PROBE_HIDDEN, PROBE_HIDDEN));
    probe.push("bn2", BatchNorm::new(PROBE_HIDDEN));
    probe.push("relu2", Relu::new());
    probe.push("out", Linear::new(PROBE_HIDDEN, classes));
    let head = Sequential::new().with("probe", probe);
    Model::assemble(backbone, head, HeadKind::Probe { classes }, init_seed)
}

pub fn set_backbone_trainable<T: Scalar>(mut model: Model<T>, trainable: bool) -> Model<T> {
    model.set_backbone_trainable(trainable);
    model
}

impl<T: Scalar> Model<T> {
    fn assemble(backbone: Backbone<T>, mut head: Sequential<T>, head_kind: HeadKind, init_seed: u64) -> Result<Self> {
        let mut slots = Vec::new();
        head.visit("", &mut slots);
        init_slots(&mut slots, init_seed);
        drop(slots);
        Ok(Self {
            backbone,
            head,
            head_kind,
            backbone_trainable: true,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        self.backbone.spec()
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn backbone_trainable(&self) -> bool {
        self.backbone_trainable
    }

    /// With `false`, the backbone always runs in inference mode (running
    /// batch-norm statistics, no updates) and receives no gradients.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        self.backbone_trainable = trainable;
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone<T> {
        &mut self.backbone
    }

    pub fn into_backbone(self) -> Backbone<T> {
        self.backbone
    }

    /// Pooled backbone features in inference mode.
    pub fn features(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.backbone.forward(x, false)
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let feats = self.backbone.forward(x, train && self.backbone_trainable);
        self.head.forward(&feats, train)
    }

    /// Head only, on precomputed features.
    pub fn forward_head(&mut self, features: &Tensor<T>, train: bool) -> Tensor<T> {
        self.head.forward(features, train)
    }

    /// Backpropagates logit gradients from the last training forward.
    pub fn backward(&mut self, grad: &Tensor<T>) {
        let g = self.head.backward(grad);
        if self.backbone_trainable {
            self.backbone.backward(&g);
        }
    }

    /// Head-only backward after [`Model::forward_head`].
    pub fn backward_head(&mut self, grad: &Tensor<T>) {
        self.head.backward(grad);
    }

    pub fn probabilities(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x, false).softmax_rows()
    }

    /// Every parameter and buffer, backbone first.
    pub fn slots(&mut self) -> NamedSlots<'_, T> {
        let mut out = Vec::new();
        self.backbone.visit(&mut out);
        self.head.visit("", &mut out);
        out
    }

    /// Parameters the optimizer may update under the current freeze mode.
    pub fn trainable_slots(&mut self) -> NamedSlots<'_, T> {
        let mut out = Vec::new();
        if self.backbone_trainable {
            self.backbone.visit(&mut out);
        }
        self.head.visit("", &mut out);
        out.retain(|(_, s)| s.is_param());
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, slot) in self.slots().iter_mut() {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        }
    }

    pub fn head_parameter_count(&mut self) -> usize {
        let mut out = Vec::new();
        self.head.visit("", &mut out);
        out.iter().filter(|(_, s)| s.is_param()).map(|(_, s)| s.value().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot<T: Scalar>(model: &mut Model<T>) -> Vec<(String, Vec<f64>)> {
        model
            .slots()
            .iter()
            .map(|(n, s)| (n.clone(), s.value().data().iter().map(|v| v.as_f64()).collect()))
            .collect()
    }

    #[test]
    fn vgg16_full_and_truncated_shapes() {
        let spec = BackboneSpec::new(Arch::Vgg16, 5).unwrap();
        let trace = spec.shape_trace();
        assert_eq!(trace.len(), 5);
        assert_eq!(trace[4], BlockShape { block: 5, channels: 512, height: 1, width: 1 });
        let two = BackboneSpec::new(Arch::Vgg16, 2).unwrap();
        assert_eq!(two.shape_trace()[1], BlockShape { block: 2, channels: 128, height: 8, width: 8 });
        let small = two.with_width_divisor(8).unwrap();
        let mut bb = build_backbone::<f32>(small, 0).unwrap();
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let map = bb.forward_map(&x);
        assert_eq!(map.shape(), &[2, 16, 8, 8]);
        assert_eq!(bb.forward(&x, false).shape(), &[2, 16]);
    }

    #[test]
    fn shape_trace_matches_built_layers() {
        for arch in Arch::ALL {
            for b in 1..=arch.max_blocks() {
                let full = BackboneSpec::new(arch, b).unwrap();
                let built = build_blocks::<f32>(&full);
                let expect = full.shape_trace().last().copied().unwrap();
                assert_eq!(
                    built.output_shape(&[1, 3, 32, 32]),
                    vec![1, expect.channels, expect.height, expect.width],
                    "{full}"
                );
                let thin = full.with_width_divisor(16).unwrap();
                let mut bb = build_backbone::<f32>(thin, 0).unwrap();
                let x = Tensor::full(&[2, 3, 32, 32], 0.1);
                let t = thin.shape_trace().last().copied().unwrap();
                assert_eq!(bb.forward_map(&x).shape(), &[2, t.channels, t.height, t.width], "{thin}");
            }
        }
    }

    #[test]
    fn documented_full_width_features() {
        let cases = [
            ("vgg16-5", 512),
            ("nin-3", 192),
            ("nin-1", 96),
            ("resnet50-5", 2048),
            ("resnet152v2-3", 512),
            ("densenet201-5", 1920),
            ("densenet201-4", 896),
        ];
        for (s, f) in cases {
            assert_eq!(s.parse::<BackboneSpec>().unwrap().feature_width(), f, "{s}");
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        assert!(matches!(BackboneSpec::new(Arch::Nin, 4), Err(Error::Config(_))));
        assert!(matches!(BackboneSpec::new(Arch::Vgg16, 0), Err(Error::Config(_))));
        assert!(BackboneSpec::new(Arch::Vgg16, 2).unwrap().with_width_divisor(3).is_err());
        assert!("vgg16-6".parse::<BackboneSpec>().is_err());
        assert!("alexnet-2".parse::<BackboneSpec>().is_err());
    }

    #[test]
    fn spec_string_round_trip() {
        for s in ["vgg16-2", "resnet152v2-5", "nin-1/w4", "densenet201-3/w16"] {
            let spec: BackboneSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("ResNet50 - 3".parse::<BackboneSpec>().unwrap().label(), "ResNet50 - 3");
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let spec = "resnet50-3/w16".parse().unwrap();
        let mut a = attach_pretext_head(build_backbone::<f32>(spec, 7).unwrap(), 4, 1).unwrap();
        let mut b = attach_pretext_head(build_backbone::<f32>(spec, 7).unwrap(), 4, 1).unwrap();
        let mut c = attach_pretext_head(build_backbone::<f32>(spec, 8).unwrap(), 4, 1).unwrap();
        assert_eq!(snapshot(&mut a), snapshot(&mut b));
        assert_ne!(snapshot(&mut a), snapshot(&mut c));
    }

    #[test]
    fn truncation_is_prefix_compatible() {
        for arch in Arch::ALL {
            for b in 1..arch.max_blocks() {
                let spec = BackboneSpec::new(arch, b).unwrap().with_width_divisor(16).unwrap();
                let deeper = BackboneSpec { num_blocks: b + 1, ..spec };
                let mut small = build_backbone::<f32>(spec, 3).unwrap();
                let mut big = build_backbone::<f32>(deeper, 3).unwrap();
                let mut s = Vec::new();
                small.visit(&mut s);
                let mut l = Vec::new();
                big.visit(&mut l);
                assert!(s.len() < l.len());
                for ((n1, s1), (n2, s2)) in s.iter().zip(&l) {
                    assert_eq!(n1, n2);
                    assert_eq!(s1.value(), s2.value(), "{arch} block {b}: {n1}");
                }
            }
        }
    }

    #[test]
    fn pretext_head_outputs_probabilities() {
        let spec = "vgg16-2/w8".parse().unwrap();
        for k in [2, 4, 10] {
            let mut m = attach_pretext_head(build_backbone::<f32>(spec, 0).unwrap(), k, 0).unwrap();
            let x = Tensor::full(&[3, 3, 32, 32], 0.5);
            let p = m.probabilities(&x);
            assert_eq!(p.shape(), &[3, k]);
            for row in p.data().chunks(k) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
        assert!(attach_pretext_head(build_backbone::<f32>(spec, 0).unwrap(), 1, 0).is_err());
    }

    #[test]
    fn probe_parameter_count_closed_form() {
        let spec: BackboneSpec = "nin-2/w4".parse().unwrap();
        let f = spec.feature_width();
        let mut m = attach_probe_head(build_backbone::<f32>(spec, 0).unwrap(), 10, 0).unwrap();
        let expect = f * 200 + 200 + 2 * 200 + 200 * 200 + 200 + 2 * 200 + 200 * 10 + 10;
        assert_eq!(m.head_parameter_count(), expect);
    }

    #[test]
    fn frozen_backbone_is_excluded_from_training() {
        let spec = "vgg16-1/w8".parse().unwrap();
        let mut m = attach_probe_head(build_backbone::<f32>(spec, 0).unwrap(), 10, 0).unwrap();
        let all = m.trainable_slots().len();
        m = set_backbone_trainable(m, false);
        let head_only = m.trainable_slots().len();
        assert!(head_only < all);
        assert!(m.trainable_slots().iter().all(|(n, _)| n.starts_with("probe.")));
    }
}
