//! Residual convolutional feature extractor shared by all camera views, and
//! an analytic multiply-accumulate counter for comparing depths.
//!
//! Blocks follow the usual ResNet layout without normalization layers:
//! every convolution carries a bias and is followed by a ReLU except the last
//! one in a residual branch, whose ReLU is applied after the shortcut sum.
//! Bottleneck blocks put the stride on the 3×3 convolution.

use std::fmt;

use crate::autodiff::{self, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Initializer, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub block_kind: BlockKind,
    pub stage_block_counts: [usize; 4],
    pub stem_channels: usize,
    pub stage_channel_multipliers: [usize; 4],
    /// `(C, H, W)` of each camera image.
    pub input_shape: (usize, usize, usize),
    /// 3×3/2 max pool after the 7×7/2 stem convolution.
    pub stem_pool: bool,
    pub stage_strides: [usize; 4],
    /// Width of a final global-pool + linear classifier; 0 for none. Only
    /// counted by [`count_flops`]; feature extraction never runs it.
    pub classifier_classes: usize,
}

/// Named backbone presets accepted by the CLI and experiment configs.
pub const PRESETS: [&str; 4] = ["resnet18-shape", "resnet50-shape", "toy-basic", "toy-bottleneck"];

impl BackboneConfig {
    fn imagenet(block_kind: BlockKind, counts: [usize; 4]) -> Self {
        Self {
            block_kind,
            stage_block_counts: counts,
            stem_channels: 64,
            stage_channel_multipliers: [1, 2, 4, 8],
            input_shape: (3, 224, 224),
            stem_pool: true,
            stage_strides: [1, 2, 2, 2],
            classifier_classes: 1000,
        }
    }

    pub fn resnet18_shape() -> Self {
        Self::imagenet(BlockKind::Basic, [2, 2, 2, 2])
    }

    pub fn resnet50_shape() -> Self {
        Self::imagenet(BlockKind::Bottleneck, [3, 4, 6, 3])
    }

    /// Desk-scale extractor for 64×96 grayscale views, output stride 16.
    pub fn toy(block_kind: BlockKind) -> Self {
        Self {
            block_kind,
            stage_block_counts: [1, 1, 1, 1],
            stem_channels: 8,
            stage_channel_multipliers: [1, 2, 4, 8],
            input_shape: (1, 64, 96),
            stem_pool: true,
            stage_strides: [1, 2, 2, 1],
            classifier_classes: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet18-shape" => Ok(Self::resnet18_shape()),
            "resnet50-shape" => Ok(Self::resnet50_shape()),
            "toy-basic" => Ok(Self::toy(BlockKind::Basic)),
            "toy-bottleneck" => Ok(Self::toy(BlockKind::Bottleneck)),
            _ => Err(Error::Config(format!(
                "unknown backbone preset `{name}`; valid presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn output_stride(&self) -> usize {
        let pool = if self.stem_pool { 2 } else { 1 };
        2 * pool * self.stage_strides.iter().product::<usize>()
    }

    pub fn output_channels(&self) -> usize {
        self.stem_channels * self.stage_channel_multipliers[3] * self.block_kind.expansion()
    }

    /// `(C_f, H_f, W_f)` of each view's feature map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let s = self.output_stride();
        (self.output_channels(), self.input_shape.1 / s, self.input_shape.2 / s)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let positive = self.stage_block_counts.iter().all(|&n| n > 0)
            && self.stage_channel_multipliers.iter().all(|&m| m > 0)
            && self.stage_strides.iter().all(|&s| s > 0)
            && self.stem_channels > 0
            && c > 0;
        if !positive {
            return Err(Error::Config(format!("backbone sizes must be positive: {self:?}")));
        }
        let s = self.output_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "output stride {s} does not divide input {h}×{w}"
            )));
        }
        Ok(())
    }

    /// Every convolution of the network in execution order (shortcuts after
    /// their block's main branch).
    fn conv_specs(&self) -> Vec<ConvSpec> {
        let (c_in, h, w) = self.input_shape;
        let mut specs = Vec::new();
        let mut h = conv_out(h, 7, 2, 3);
        let mut w = conv_out(w, 7, 2, 3);
        specs.push(ConvSpec::new("stem", c_in, self.stem_channels, 7, 2, 3, h, w));
        if self.stem_pool {
            h = conv_out(h, 3, 2, 1);
            w = conv_out(w, 3, 2, 1);
        }
        let mut channels = self.stem_channels;
        let exp = self.block_kind.expansion();
        for stage in 0..4 {
            let width = self.stem_channels * self.stage_channel_multipliers[stage];
            for block in 0..self.stage_block_counts[stage] {
                let stride = if block == 0 { self.stage_strides[stage] } else { 1 };
                let name = format!("stage{}.{}", stage + 1, block);
                let (oh, ow) = (conv_out(h, 3, stride, 1), conv_out(w, 3, stride, 1));
                let out = width * exp;
                match self.block_kind {
                    BlockKind::Basic => {
                        specs.push(ConvSpec::new(format!("{name}.conv1"), channels, width, 3, stride, 1, oh, ow));
                        specs.push(ConvSpec::new(format!("{name}.conv2"), width, width, 3, 1, 1, oh, ow));
                    }
                    BlockKind::Bottleneck => {
                        specs.push(ConvSpec::new(format!("{name}.conv1"), channels, width, 1, 1, 0, h, w));
                        specs.push(ConvSpec::new(format!("{name}.conv2"), width, width, 3, stride, 1, oh, ow));
                        specs.push(ConvSpec::new(format!("{name}.conv3"), width, out, 1, 1, 0, oh, ow));
                    }
                }
                if stride != 1 || channels != out {
                    specs.push(ConvSpec::new(format!("{name}.shortcut"), channels, out, 1, stride, 0, oh, ow));
                }
                channels = out;
                h = oh;
                w = ow;
            }
        }
        specs
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Debug)]
struct ConvSpec {
    name: String,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        }
    }
}

/// Multiply-accumulates of one convolution: `C_out·C_in·kh·kw·H'·W'`.
pub fn conv_macs(c_in: usize, c_out: usize, kh: usize, kw: usize, out_h: usize, out_w: usize) -> u64 {
    (c_out * c_in * kh * kw * out_h * out_w) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCount {
    pub name: String,
    pub macs: u64,
}

/// Per-layer multiply-accumulate counts over convolutions and linear layers.
/// Pooling, activations, biases and residual sums are not counted.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub layers: Vec<LayerCount>,
}

impl FlopReport {
    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    /// Floating-point operations with one MAC counted as two FLOPs.
    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }
}

pub fn count_flops(cfg: &BackboneConfig) -> FlopReport {
    let mut layers: Vec<LayerCount> = cfg
        .conv_specs()
        .into_iter()
        .map(|s| LayerCount {
            macs: conv_macs(s.c_in, s.c_out, s.kernel, s.kernel, s.out_h, s.out_w),
            name: s.name,
        })
        .collect();
    if cfg.classifier_classes > 0 {
        layers.push(LayerCount {
            name: "classifier".into(),
            macs: (cfg.output_channels() * cfg.classifier_classes) as u64,
        });
    }
    FlopReport { layers }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(init: &mut Initializer<'_>, spec: &ConvSpec, zero: bool) -> Result<Self> {
        let shape = [spec.c_out, spec.c_in, spec.kernel, spec.kernel];
        let weight = if zero {
            init.zeros(&format!("backbone.{}.weight", spec.name), &shape)?
        } else {
            init.kaiming(
                &format!("backbone.{}.weight", spec.name),
                &shape,
                spec.c_in * spec.kernel * spec.kernel,
            )?
        };
        let bias = init.zeros(&format!("backbone.{}.bias", spec.name), &[spec.c_out])?;
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = autodiff::conv2d(x, cx.param(self.weight), self.stride, self.padding)?;
        let c = y.shape()[1];
        y.add(cx.param(self.bias).reshape(vec![c, 1, 1])?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<Conv>,
    shortcut: Option<Conv>,
}

impl Block {
    fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut y = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(cx, y)?;
            if i != last {
                y = y.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(cx, x)?,
            None => x,
        };
        y.add(skip)?.relu()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: Conv,
    blocks: Vec<Block>,
}

impl Backbone {
    /// Kaiming fan-in initialization. With `zero_init_residual` the last
    /// convolution of every residual branch starts at zero, so each block
    /// initially passes its (shortcut) input through.
    pub fn new(init: &mut Initializer<'_>, cfg: &BackboneConfig, zero_init_residual: bool) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.conv_specs();
        let mut specs = specs.iter().peekable();
        let stem = Conv::new(init, specs.next().expect("stem"), false)?;
        let per_block = match cfg.block_kind {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        };
        let mut blocks = Vec::new();
        while specs.peek().is_some() {
            let mut convs = Vec::with_capacity(per_block);
            for i in 0..per_block {
                let spec = specs.next().expect("block conv");
                convs.push(Conv::new(init, spec, zero_init_residual && i + 1 == per_block)?);
            }
            let shortcut = match specs.peek() {
                Some(s) if s.name.ends_with(".shortcut") => Some(Conv::new(init, specs.next().unwrap(), false)?),
                _ => None,
            };
            blocks.push(Block { convs, shortcut });
        }
        Ok(Self { cfg: cfg.clone(), stem, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the network on a batch `[N, C, H, W]`, returning `[N, C_f, H_f, W_f]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, images: Var<'t>) -> Result<Var<'t>> {
        let mut x = self.stem.forward(cx, images)?.relu()?;
        if self.cfg.stem_pool {
            x = autodiff::max_pool2d(x, 3, 2, 1)?;
        }
        for block in &self.blocks {
            x = block.forward(cx, x)?;
        }
        Ok(x)
    }

    /// Extracts one feature map per view with shared weights. The views are
    /// batched in the given order; the result's leading axis is the view
    /// index.
    pub fn extract_features<'t>(&self, cx: &Ctx<'t, '_>, views: &[Tensor]) -> Result<Var<'t>> {
        let (c, h, w) = self.cfg.input_shape;
        let mut data = Vec::with_capacity(views.len() * c * h * w);
        for (i, view) in views.iter().enumerate() {
            if view.shape() != [c, h, w] {
                return Err(Error::Dimension(format!(
                    "view {i} has shape {:?}, backbone expects {:?}",
                    view.shape(),
                    [c, h, w]
                )));
            }
            data.extend_from_slice(view.data());
        }
        let batch = Tensor::new(vec![views.len(), c, h, w], data)?;
        self.forward(cx, cx.constant(batch))
    }
}
