//! Shared encoder plus task heads, and the single-task baselines.

use autograd::{Param, ParamStore, Real, Tensor};
use ndarray::{Array4, ArrayD, Axis, IxDyn};

use super::config::{ModelConfig, Variant};
use super::PipelineError;
use crate::datamodel::{Detection, GradePrediction, VolumeSample, MODALITIES};
use crate::decoders::{postprocess_detections, Anchor, ClsDecoder, DetDecoder, DetOutput, SegDecoder};
use crate::encoder::Encoder;

pub const ENCODER_PREFIX: &str = "encoder";
pub const SEG_PREFIX: &str = "seg_decoder";
pub const DET_PREFIX: &str = "det_decoder";
pub const CLS_PREFIX: &str = "cls_decoder";

pub struct ModelOutput<T: Real> {
    pub seg_logits: Option<Tensor<T>>,
    pub cls_logits: Option<Tensor<T>>,
    pub det: Option<DetOutput<T>>,
}

/// Per-case predictions after post-processing.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Binary region masks `[3, D, H, W]`.
    pub mask: Option<Array4<u8>>,
    pub grade: Option<GradePrediction>,
    pub detections: Option<Vec<Detection>>,
}

pub struct MultiTaskModel<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder<T>,
    pub seg: Option<SegDecoder<T>>,
    pub cls: Option<ClsDecoder<T>>,
    pub det: Option<DetDecoder<T>>,
}

impl<T: Real> MultiTaskModel<T> {
    /// Builds the heads named by `config.variant` on a freshly initialised encoder.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, PipelineError> {
        let store = ParamStore::new(seed);
        let root = store.root();
        let cfg_err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        let encoder = Encoder::new(&root.pp(ENCODER_PREFIX), &config.encoder).map_err(|e| cfg_err(&e))?;
        let ch = config.encoder.pyramid_channels();
        let [seg_on, cls_on, det_on] = config.variant.heads();
        let seg = seg_on.then(|| SegDecoder::new(&root.pp(SEG_PREFIX), ch, &config.seg));
        let cls = if cls_on {
            let cin = config.cls.in_channels(config.seg.out_channels, config.encoder.in_channels);
            Some(ClsDecoder::new(&root.pp(CLS_PREFIX), cin, &config.cls).map_err(|e| cfg_err(&e))?)
        } else {
            None
        };
        let det = if det_on {
            Some(DetDecoder::new(&root.pp(DET_PREFIX), ch, &config.det).map_err(|e| cfg_err(&e))?)
        } else {
            None
        };
        Ok(MultiTaskModel {
            config: config.clone(),
            store,
            encoder,
            seg,
            cls,
            det,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encoder_params(&self) -> Vec<Param<T>> {
        self.store.with_prefix(&format!("{ENCODER_PREFIX}.")).into_iter().map(|(_, p)| p).collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ModelOutput<T>, PipelineError> {
        let pyr = self.encoder.encode(x).map_err(|e| PipelineError::Model(e.to_string()))?;
        let dec = |e: crate::decoders::DecoderError| PipelineError::Model(e.to_string());
        let seg_logits = match &self.seg {
            Some(s) => Some(s.forward(&pyr).map_err(dec)?),
            None => None,
        };
        let cls_logits = match (&self.cls, &seg_logits) {
            (Some(c), Some(seg)) => Some(c.forward(&c.input(&seg.sigmoid(), x)).map_err(dec)?),
            _ => None,
        };
        let det = match &self.det {
            Some(d) => Some(d.forward(&pyr).map_err(dec)?),
            None => None,
        };
        Ok(ModelOutput { seg_logits, cls_logits, det })
    }

    pub fn anchors(&self, extent: [usize; 3]) -> Vec<Anchor> {
        self.det.as_ref().map(|d| d.anchors(extent)).unwrap_or_default()
    }

    /// Inference on one preprocessed case, without building a graph.
    pub fn predict(&self, sample: &VolumeSample, anchors: &[Anchor]) -> Result<Prediction, PipelineError> {
        let _ng = autograd::no_grad();
        let x = image_batch::<T>(&[sample]);
        let out = self.forward(&x)?;
        Ok(self.postprocess(&out, sample.spatial_shape(), anchors).remove(0))
    }

    /// Thresholds, decodes and suppresses a batch of raw outputs.
    pub fn postprocess(&self, out: &ModelOutput<T>, extent: [usize; 3], anchors: &[Anchor]) -> Vec<Prediction> {
        let n = out
            .seg_logits
            .as_ref()
            .map(|t| t.shape()[0])
            .or(out.cls_logits.as_ref().map(|t| t.shape()[0]))
            .or(out.det.as_ref().map(|d| d.logits.shape()[0]))
            .unwrap_or(0);
        (0..n)
            .map(|i| {
                let mask = out.seg_logits.as_ref().filter(|_| self.config.variant.tasks()[0]).map(|t| {
                    let v = t.value().index_axis(Axis(0), i).mapv(|l| u8::from(l >= T::zero()));
                    v.into_dimensionality().expect("[C, D, H, W]")
                });
                let grade = out.cls_logits.as_ref().map(|t| {
                    let row = t.value();
                    GradePrediction::from_logits([row[[i, 0]].as_f64(), row[[i, 1]].as_f64()])
                });
                let detections = out.det.as_ref().map(|d| {
                    let l = d.logits.value();
                    let dd = d.deltas.value();
                    let logits: Vec<f64> = l.index_axis(Axis(0), i).iter().map(|v| v.as_f64()).collect();
                    let deltas: Vec<[f64; 6]> = dd
                        .index_axis(Axis(0), i)
                        .outer_iter()
                        .map(|r| std::array::from_fn(|k| r[k].as_f64()))
                        .collect();
                    postprocess_detections(&logits, &deltas, anchors, extent, &self.config.det)
                });
                Prediction { mask, grade, detections }
            })
            .collect()
    }
}

/// A single-task baseline with its own encoder.
pub fn build_single_task<T: Real>(config: &ModelConfig, variant: Variant, seed: u64) -> Result<MultiTaskModel<T>, PipelineError> {
    if variant == Variant::Multi {
        return Err(PipelineError::Config("build_single_task needs a single-task variant".into()));
    }
    let mut c = config.clone();
    c.variant = variant;
    MultiTaskModel::new(&c, seed)
}

/// Parameter counts of the multi-task model and the three baselines.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SharingSummary {
    pub multi: usize,
    pub seg_only: usize,
    pub det_only: usize,
    pub cls_only: usize,
}

impl SharingSummary {
    pub fn singles(&self) -> usize {
        self.seg_only + self.det_only + self.cls_only
    }

    /// Fraction of the baseline total saved by sharing.
    pub fn reduction(&self) -> f64 {
        1.0 - self.multi as f64 / self.singles() as f64
    }
}

/// Builds each variant in turn (one in memory at a time) and counts parameters.
pub fn sharing_summary(config: &ModelConfig) -> Result<SharingSummary, PipelineError> {
    let count = |v: Variant| -> Result<usize, PipelineError> {
        let mut c = config.clone();
        c.variant = v;
        Ok(MultiTaskModel::<f32>::new(&c, 0)?.num_params())
    };
    Ok(SharingSummary {
        multi: count(Variant::Multi)?,
        seg_only: count(Variant::SegOnly)?,
        det_only: count(Variant::DetOnly)?,
        cls_only: count(Variant::ClsOnly)?,
    })
}

/// Stacks images into `[N, 4, D, H, W]`.
pub fn image_batch<T: Real>(samples: &[&VolumeSample]) -> Tensor<T> {
    let shape = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    for s in samples {
        assert_eq!(s.image.shape(), shape.as_slice(), "batch members must share a shape");
        data.extend(s.image.iter().map(|&v| T::lit(v as f64)));
    }
    debug_assert_eq!(shape[0], MODALITIES.len());
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(ArrayD::from_shape_vec(IxDyn(&full), data).expect("sizes match"))
}

/// Stacks region masks into `[N, 3, D, H, W]` in `{0, 1}`.
pub fn mask_batch<T: Real>(samples: &[&VolumeSample]) -> Tensor<T> {
    let shape = samples[0].mask.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].mask.len());
    for s in samples {
        data.extend(s.mask.iter().map(|&v| T::lit(v as f64)));
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(ArrayD::from_shape_vec(IxDyn(&full), data).expect("sizes match"))
}
