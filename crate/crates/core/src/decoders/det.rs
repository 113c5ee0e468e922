//! Anchor-based detection decoder: FPN or PANet neck over pyramid levels 2–5
//! and two subnets shared across levels.

use autograd::nn::{group_count, Conv3d, GroupNorm};
use autograd::{Init, Real, Scope, Tensor};
use serde::{Deserialize, Serialize};

use super::boxes::{decode_box, generate_anchors, nms, Anchor};
use super::DecoderError;
use crate::datamodel::Detection;
use crate::encoder::FeaturePyramid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Neck {
    #[serde(rename = "fpn", alias = "FPN")]
    Fpn,
    #[serde(rename = "panet", alias = "PANet")]
    PaNet,
}

impl std::fmt::Display for Neck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Neck::Fpn => "fpn",
            Neck::PaNet => "panet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionHeadConfig {
    pub neck: Neck,
    pub neck_channels: usize,
    /// Anchor sizes per level, in units of the level stride.
    pub anchor_scales: Vec<Vec<f64>>,
    pub subnet_depth: usize,
    pub iou_pos: f64,
    pub iou_neg: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Cap on detections kept after NMS.
    pub max_detections: usize,
}

impl Default for DetectionHeadConfig {
    fn default() -> Self {
        DetectionHeadConfig {
            neck: Neck::PaNet,
            neck_channels: 128,
            anchor_scales: vec![vec![4.0]; 4],
            subnet_depth: 4,
            iou_pos: 0.5,
            iou_neg: 0.4,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
        }
    }
}

impl DetectionHeadConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.iou_pos) && unit(self.iou_neg) && unit(self.nms_iou) && unit(self.score_threshold)) {
            return Err(DecoderError::Config("detection thresholds must lie in [0, 1]".into()));
        }
        if self.iou_neg > self.iou_pos {
            return Err(DecoderError::Config(format!(
                "iou_neg {} exceeds iou_pos {}",
                self.iou_neg, self.iou_pos
            )));
        }
        let counts: Vec<usize> = self.anchor_scales.iter().map(Vec::len).collect();
        if counts.len() != 4 || counts.iter().any(|&c| c == 0 || c != counts[0]) {
            return Err(DecoderError::Config(
                "anchor_scales needs 4 levels with the same nonzero number of scales".into(),
            ));
        }
        if self.anchor_scales.iter().flatten().any(|&s| s <= 0.0) {
            return Err(DecoderError::Config("anchor scales must be positive".into()));
        }
        if self.neck_channels == 0 {
            return Err(DecoderError::Config("neck_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales[0].len()
    }
}

/// Pyramid levels the detector reads.
pub const DET_LEVELS: [usize; 4] = [2, 3, 4, 5];

/// `(extent, stride)` of each detection level for an input extent.
pub fn level_geometry(input: [usize; 3]) -> Vec<([usize; 3], usize)> {
    DET_LEVELS
        .iter()
        .map(|&l| (input.map(|s| s >> l), 1 << l))
        .collect()
}

pub struct DetNeck<T: Real> {
    pub lateral: Vec<Conv3d<T>>,
    pub smooth: Vec<Conv3d<T>>,
    /// Bottom-up path (PANet only): strided conv and fusion conv per step.
    pub down: Vec<Conv3d<T>>,
    pub fuse: Vec<Conv3d<T>>,
}

impl<T: Real> DetNeck<T> {
    pub fn new(vs: &Scope<T>, in_channels: [usize; 4], c: usize, neck: Neck) -> Self {
        let lateral = (0..4)
            .map(|i| Conv3d::same(&vs.pp("lateral").pp(i.to_string()), in_channels[i], c, 1, true))
            .collect();
        let smooth = (0..4)
            .map(|i| Conv3d::same(&vs.pp("smooth").pp(i.to_string()), c, c, 3, true))
            .collect();
        let (down, fuse) = match neck {
            Neck::Fpn => (Vec::new(), Vec::new()),
            Neck::PaNet => (
                (0..3)
                    .map(|i| Conv3d::new(&vs.pp("down").pp(i.to_string()), c, c, 3, 2, 1, true))
                    .collect(),
                (0..3)
                    .map(|i| Conv3d::same(&vs.pp("fuse").pp(i.to_string()), 2 * c, c, 3, true))
                    .collect(),
            ),
        };
        DetNeck {
            lateral,
            smooth,
            down,
            fuse,
        }
    }

    /// Four levels of `C` channels at extents `S/4 … S/32`.
    pub fn forward(&self, feats: &[Tensor<T>]) -> Vec<Tensor<T>> {
        let lat: Vec<Tensor<T>> = self.lateral.iter().zip(feats).map(|(c, f)| c.forward(f)).collect();
        // top-down
        let mut merged = vec![lat[3].clone()];
        for i in (0..3).rev() {
            let prev = merged.last().expect("nonempty");
            let size: [usize; 3] = lat[i].shape()[2..].try_into().expect("3D");
            merged.push(lat[i].add(&prev.upsample_nearest(size)));
        }
        merged.reverse();
        let p: Vec<Tensor<T>> = self.smooth.iter().zip(&merged).map(|(c, m)| c.forward(m)).collect();
        if self.down.is_empty() {
            return p;
        }
        // bottom-up
        let mut n = vec![p[0].clone()];
        for i in 0..3 {
            let d = self.down[i].forward(&n[i]).relu();
            n.push(self.fuse[i].forward(&Tensor::concat(&[d, p[i + 1].clone()], 1)).relu());
        }
        n
    }
}

/// `depth` × (conv, GroupNorm, ReLU) followed by an output conv.
pub struct Subnet<T: Real> {
    pub convs: Vec<(Conv3d<T>, GroupNorm<T>)>,
    pub out: Conv3d<T>,
}

impl<T: Real> Subnet<T> {
    fn new(vs: &Scope<T>, c: usize, depth: usize, out: usize, out_bias: f64) -> Self {
        let convs = (0..depth)
            .map(|i| {
                let s = vs.pp("conv").pp(i.to_string());
                (
                    Conv3d::with_init(&s, (c, c, 3), 1, 1, Init::Normal(0.01), Some(Init::Zeros)),
                    GroupNorm::new(&vs.pp("norm").pp(i.to_string()), group_count(c, 32), c),
                )
            })
            .collect();
        Subnet {
            convs,
            out: Conv3d::with_init(&vs.pp("out"), (c, out, 3), 1, 1, Init::Normal(0.01), Some(Init::Const(out_bias))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for (conv, norm) in &self.convs {
            h = norm.forward(&conv.forward(&h)).relu();
        }
        self.out.forward(&h)
    }
}

/// Raw head outputs aligned with [`generate_anchors`] order.
pub struct DetOutput<T: Real> {
    /// `[N, A]` objectness logits.
    pub logits: Tensor<T>,
    /// `[N, A, 6]` box deltas.
    pub deltas: Tensor<T>,
}

pub struct DetDecoder<T: Real> {
    pub cfg: DetectionHeadConfig,
    pub neck: DetNeck<T>,
    pub cls_subnet: Subnet<T>,
    pub box_subnet: Subnet<T>,
}

/// Objectness prior probability at initialisation.
const PRIOR: f64 = 0.01;

impl<T: Real> DetDecoder<T> {
    /// `pyramid_channels`: channel counts of pyramid levels 0..=5.
    pub fn new(vs: &Scope<T>, pyramid_channels: [usize; 6], cfg: &DetectionHeadConfig) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let c = cfg.neck_channels;
        let a = cfg.anchors_per_cell();
        let ins = DET_LEVELS.map(|l| pyramid_channels[l]);
        Ok(DetDecoder {
            cfg: cfg.clone(),
            neck: DetNeck::new(&vs.pp("neck"), ins, c, cfg.neck),
            cls_subnet: Subnet::new(&vs.pp("cls_subnet"), c, cfg.subnet_depth, a, -((1.0 - PRIOR) / PRIOR).ln()),
            box_subnet: Subnet::new(&vs.pp("box_subnet"), c, cfg.subnet_depth, 6 * a, 0.0),
        })
    }

    pub fn neck_levels(&self, pyr: &FeaturePyramid<T>) -> Vec<Tensor<T>> {
        let feats: Vec<Tensor<T>> = DET_LEVELS.iter().map(|&l| pyr.stages[l].clone()).collect();
        self.neck.forward(&feats)
    }

    /// Subnets over already-built neck levels.
    pub fn head(&self, levels: &[Tensor<T>]) -> DetOutput<T> {
        let a = self.cfg.anchors_per_cell();
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        for lvl in levels {
            let n = lvl.shape()[0];
            let cells: usize = lvl.shape()[2..].iter().product();
            let (d, h, w) = (lvl.shape()[2], lvl.shape()[3], lvl.shape()[4]);
            logits.push(self.cls_subnet.forward(lvl).permute(&[0, 2, 3, 4, 1]).reshape(&[n, cells * a]));
            deltas.push(
                self.box_subnet
                    .forward(lvl)
                    .reshape(&[n, a, 6, d, h, w])
                    .permute(&[0, 3, 4, 5, 1, 2])
                    .reshape(&[n, cells * a, 6]),
            );
        }
        DetOutput {
            logits: Tensor::concat(&logits, 1),
            deltas: Tensor::concat(&deltas, 1),
        }
    }

    pub fn forward(&self, pyr: &FeaturePyramid<T>) -> Result<DetOutput<T>, DecoderError> {
        if pyr.stages.len() != 6 {
            return Err(DecoderError::Pyramid(format!("expected 6 levels, got {}", pyr.stages.len())));
        }
        Ok(self.head(&self.neck_levels(pyr)))
    }

    pub fn anchors(&self, input: [usize; 3]) -> Vec<Anchor> {
        generate_anchors(&level_geometry(input), &self.cfg.anchor_scales)
    }
}

/// Largest log-size delta applied when decoding network outputs.
const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

/// Scores, thresholds, decodes, clips and suppresses one sample's outputs.
pub fn postprocess_detections(
    logits: &[f64],
    deltas: &[[f64; 6]],
    anchors: &[Anchor],
    extent: [usize; 3],
    cfg: &DetectionHeadConfig,
) -> Vec<Detection> {
    assert_eq!(logits.len(), anchors.len(), "one logit per anchor");
    assert_eq!(deltas.len(), anchors.len(), "one delta per anchor");
    let mut cand = Vec::new();
    for ((&l, d), a) in logits.iter().zip(deltas).zip(anchors) {
        let score = 1.0 / (1.0 + (-l).exp());
        if score < cfg.score_threshold {
            continue;
        }
        let mut d = *d;
        for v in &mut d[3..] {
            *v = v.min(MAX_LOG_SCALE);
        }
        let box_ = decode_box(&d, a).clip(extent);
        if box_.volume() > 0.0 {
            cand.push(Detection { box_, score });
        }
    }
    let mut kept = nms(&cand, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}
