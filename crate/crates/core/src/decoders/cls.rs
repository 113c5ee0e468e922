//! 3D DenseNet grading classifier fed by the segmentation output.

use autograd::nn::{group_count, Conv3d, GroupNorm, Linear};
use autograd::{Init, Real, Scope, Tensor};
use serde::{Deserialize, Serialize};

use super::DecoderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsInput {
    SegOnly,
    SegPlusImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClsHeadConfig {
    pub growth_rate: usize,
    pub block_config: Vec<usize>,
    pub init_features: usize,
    pub bn_size: usize,
    pub input: ClsInput,
    pub num_classes: usize,
    /// Stop classification gradients at the segmentation probabilities.
    pub detach_seg: bool,
}

impl Default for ClsHeadConfig {
    fn default() -> Self {
        ClsHeadConfig {
            growth_rate: 32,
            block_config: vec![6, 12, 24, 16],
            init_features: 64,
            bn_size: 4,
            input: ClsInput::SegPlusImage,
            num_classes: 2,
            detach_seg: false,
        }
    }
}

impl ClsHeadConfig {
    pub fn in_channels(&self, seg_channels: usize, image_channels: usize) -> usize {
        match self.input {
            ClsInput::SegOnly => seg_channels,
            ClsInput::SegPlusImage => seg_channels + image_channels,
        }
    }

    /// Channel count entering each dense block and leaving the last one.
    pub fn channel_trace(&self) -> (Vec<usize>, usize) {
        let mut c = self.init_features;
        let mut ins = Vec::new();
        for (i, &layers) in self.block_config.iter().enumerate() {
            ins.push(c);
            c += layers * self.growth_rate;
            if i + 1 < self.block_config.len() {
                c /= 2;
            }
        }
        (ins, c)
    }
}

/// At least four channels per group: the deepest stages can shrink to 1³,
/// where a single-channel group would normalise every value to zero.
fn norm<T: Real>(vs: &Scope<T>, c: usize) -> GroupNorm<T> {
    GroupNorm::new(vs, group_count(c, (c / 4).clamp(1, 32)), c)
}

/// Bottleneck layer: norm, ReLU, 1³ conv to `bn_size·k`, norm, ReLU, 3³ conv to `k`.
pub struct DenseLayer<T: Real> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv3d<T>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv3d<T>,
}

impl<T: Real> DenseLayer<T> {
    fn new(vs: &Scope<T>, cin: usize, growth: usize, bn_size: usize) -> Self {
        let mid = bn_size * growth;
        DenseLayer {
            norm1: norm(&vs.pp("norm1"), cin),
            conv1: Conv3d::same(&vs.pp("conv1"), cin, mid, 1, false),
            norm2: norm(&vs.pp("norm2"), mid),
            conv2: Conv3d::same(&vs.pp("conv2"), mid, growth, 3, false),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward(&self.norm1.forward(x).relu());
        self.conv2.forward(&self.norm2.forward(&h).relu())
    }
}

/// Layer `l` sees the concatenation of the block input and all earlier layer outputs.
pub struct DenseBlock<T: Real> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Real> DenseBlock<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut feats = vec![x.clone()];
        for layer in &self.layers {
            let input = if feats.len() == 1 {
                feats[0].clone()
            } else {
                Tensor::concat(&feats, 1)
            };
            feats.push(layer.forward(&input));
        }
        Tensor::concat(&feats, 1)
    }
}

/// Norm, ReLU, 1³ conv halving channels, 2³ average pooling.
pub struct Transition<T: Real> {
    pub norm: GroupNorm<T>,
    pub conv: Conv3d<T>,
}

pub struct ClsDecoder<T: Real> {
    pub cfg: ClsHeadConfig,
    pub conv0: Conv3d<T>,
    pub norm0: GroupNorm<T>,
    pub blocks: Vec<DenseBlock<T>>,
    pub transitions: Vec<Transition<T>>,
    pub norm5: GroupNorm<T>,
    pub classifier: Linear<T>,
    in_channels: usize,
}

impl<T: Real> ClsDecoder<T> {
    pub fn new(vs: &Scope<T>, in_channels: usize, cfg: &ClsHeadConfig) -> Result<Self, DecoderError> {
        if cfg.block_config.is_empty() || cfg.growth_rate == 0 || cfg.init_features == 0 || cfg.num_classes < 2 {
            return Err(DecoderError::Config("classifier needs blocks, growth > 0 and at least 2 classes".into()));
        }
        let f = vs.pp("features");
        let mut c = cfg.init_features;
        let conv0 = Conv3d::new(&f.pp("conv0"), in_channels, c, 7, 2, 3, false);
        let norm0 = norm(&f.pp("norm0"), c);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in cfg.block_config.iter().enumerate() {
            let bs = f.pp(format!("denseblock{}", i + 1));
            let layers = (0..n)
                .map(|j| DenseLayer::new(&bs.pp(format!("denselayer{}", j + 1)), c + j * cfg.growth_rate, cfg.growth_rate, cfg.bn_size))
                .collect();
            blocks.push(DenseBlock { layers });
            c += n * cfg.growth_rate;
            if i + 1 < cfg.block_config.len() {
                let ts = f.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    norm: norm(&ts.pp("norm"), c),
                    conv: Conv3d::same(&ts.pp("conv"), c, c / 2, 1, false),
                });
                c /= 2;
            }
        }
        Ok(ClsDecoder {
            cfg: cfg.clone(),
            conv0,
            norm0,
            blocks,
            transitions,
            norm5: norm(&f.pp("norm5"), c),
            classifier: Linear::new(&vs.pp("class_layers").pp("out"), c, cfg.num_classes, true, Init::FanIn(c)),
            in_channels,
        })
    }

    /// Builds the classifier input from sigmoid segmentation output and the image.
    pub fn input(&self, seg_probs: &Tensor<T>, image: &Tensor<T>) -> Tensor<T> {
        let seg = if self.cfg.detach_seg {
            seg_probs.detach()
        } else {
            seg_probs.clone()
        };
        match self.cfg.input {
            ClsInput::SegOnly => seg,
            ClsInput::SegPlusImage => Tensor::concat(&[seg, image.clone()], 1),
        }
    }

    /// `[N, in, S, S, S]` → `[N, num_classes]` logits.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, DecoderError> {
        if x.ndim() != 5 || x.shape()[1] != self.in_channels {
            return Err(DecoderError::Pyramid(format!(
                "classifier expects [N, {}, D, H, W], got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let mut h = self.norm0.forward(&self.conv0.forward(x)).relu().max_pool3d(3, 2, 1);
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h);
            if let Some(t) = self.transitions.get(i) {
                h = t.conv.forward(&t.norm.forward(&h).relu());
                if h.shape()[2..].iter().all(|&s| s >= 2) {
                    h = h.avg_pool3d(2);
                }
            }
        }
        let h = self.norm5.forward(&h).relu().mean_axes(&[2, 3, 4]);
        Ok(self.classifier.forward(&h))
    }
}
