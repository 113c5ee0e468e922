//! U-shaped segmentation decoder over the six-level pyramid.

use autograd::nn::{Conv3d, ConvTranspose3d};
use autograd::{Real, Scope, Tensor};
use serde::{Deserialize, Serialize};

use super::DecoderError;
use crate::encoder::{FeaturePyramid, ResBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegHeadConfig {
    pub out_channels: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        SegHeadConfig { out_channels: 3 }
    }
}

/// Transposed-conv upsampling, skip concatenation, residual block.
pub struct UpBlock<T: Real> {
    pub up: ConvTranspose3d<T>,
    pub res: ResBlock<T>,
}

impl<T: Real> UpBlock<T> {
    pub fn new(vs: &Scope<T>, cin: usize, cout: usize) -> Self {
        UpBlock {
            up: ConvTranspose3d::new(&vs.pp("transp_conv"), cin, cout, 2, false),
            res: ResBlock::new(&vs.pp("conv_block"), 2 * cout, cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, skip: &Tensor<T>) -> Tensor<T> {
        let up = self.up.forward(x);
        self.res.forward(&Tensor::concat(&[up, skip.clone()], 1))
    }
}

pub struct SegDecoder<T: Real> {
    /// Residual blocks on pyramid levels 1–4.
    pub skips: Vec<ResBlock<T>>,
    pub bottleneck: ResBlock<T>,
    /// Up blocks from the bottleneck down to full resolution.
    pub ups: Vec<UpBlock<T>>,
    pub out: Conv3d<T>,
    channels: [usize; 6],
}

impl<T: Real> SegDecoder<T> {
    /// `channels`: pyramid channel counts for levels 0..=5.
    pub fn new(vs: &Scope<T>, channels: [usize; 6], cfg: &SegHeadConfig) -> Self {
        let skips = (1..5)
            .map(|i| ResBlock::new(&vs.pp(format!("encoder{i}")), channels[i], channels[i]))
            .collect();
        let ups = (0..5)
            .rev()
            .map(|i| UpBlock::new(&vs.pp(format!("decoder{}", i + 1)), channels[i + 1], channels[i]))
            .collect();
        SegDecoder {
            skips,
            bottleneck: ResBlock::new(&vs.pp("bottleneck"), channels[5], channels[5]),
            ups,
            out: Conv3d::same(&vs.pp("out"), channels[0], cfg.out_channels, 1, true),
            channels,
        }
    }

    /// Logits `[N, out_channels, S, S, S]`.
    pub fn forward(&self, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>, DecoderError> {
        super::check_pyramid(pyr, &self.channels)?;
        let s = &pyr.stages;
        let mut skips = vec![s[0].clone()];
        skips.extend(self.skips.iter().zip(&s[1..5]).map(|(b, x)| b.forward(x)));
        let mut x = self.bottleneck.forward(&s[5]);
        for (up, skip) in self.ups.iter().zip(skips.iter().rev()) {
            x = up.forward(&x, skip);
        }
        Ok(self.out.forward(&x))
    }
}
