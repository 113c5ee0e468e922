//! Single-crop evaluation and efficiency measurement.

use autograd::{profile, Real, Tensor};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::MultiTaskModel;
use super::PipelineError;
use crate::datamodel::{BoxF, Detection, Grade, VolumeSample};
use crate::decoders::iou_3d;
use crate::metrics::{
    classification_metrics, dice_metric, hausdorff, layer_macs, map_sweep, median_latency, Efficiency, LayerMacs,
    MetricsReport,
};

/// Per-case outcome, kept alongside the aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub dice: Option<[f64; 3]>,
    pub hd: Option<[Option<f64>; 3]>,
    pub grade: Grade,
    pub predicted_grade: Option<Grade>,
    pub hgg_probability: Option<f64>,
    pub gt_box: BoxF,
    pub top_detection: Option<Detection>,
    /// IoU of the highest-scoring detection with the ground-truth box.
    pub top_iou: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs the model on every case and aggregates the task metrics; the
/// efficiency block is supplied by the caller.
pub fn evaluate_cases<T: Real>(
    model: &MultiTaskModel<T>,
    cases: &[VolumeSample],
    hd_percentile: f64,
    efficiency: Efficiency,
) -> Result<(MetricsReport, Vec<CaseResult>), PipelineError> {
    if cases.is_empty() {
        return Err(PipelineError::EmptySplit);
    }
    let extent = cases[0].spatial_shape();
    let anchors = model.anchors(extent);
    let mut results = Vec::with_capacity(cases.len());
    let mut all_dets = Vec::new();
    for case in cases {
        if case.spatial_shape() != extent {
            return Err(PipelineError::Other(format!(
                "case {} has extent {:?}, expected {extent:?}",
                case.case_id,
                case.spatial_shape()
            )));
        }
        let pred = model.predict(case, &anchors)?;
        let (dice, hd) = match &pred.mask {
            Some(m) => {
                let d: [f64; 3] = std::array::from_fn(|r| {
                    dice_metric(&m.index_axis(ndarray::Axis(0), r), &case.mask.index_axis(ndarray::Axis(0), r))
                });
                let h: [Option<f64>; 3] = std::array::from_fn(|r| {
                    hausdorff(
                        &m.index_axis(ndarray::Axis(0), r),
                        &case.mask.index_axis(ndarray::Axis(0), r),
                        hd_percentile,
                    )
                });
                (Some(d), Some(h))
            }
            None => (None, None),
        };
        let gt_box = case.box_.to_real();
        let top = pred.detections.as_ref().and_then(|d| d.first().copied());
        if let Some(d) = &pred.detections {
            all_dets.push(d.clone());
        }
        results.push(CaseResult {
            case_id: case.case_id.clone(),
            dice,
            hd,
            grade: case.grade,
            predicted_grade: pred.grade.map(|g| g.grade()),
            hgg_probability: pred.grade.map(|g| g.probability),
            gt_box,
            top_detection: top,
            top_iou: pred.detections.as_ref().map(|_| top.map_or(0.0, |t| iou_3d(&t.box_, &gt_box))),
        });
    }
    let tasks = model.variant().tasks();
    let dice = tasks[0].then(|| {
        std::array::from_fn(|r| mean(results.iter().filter_map(|c| c.dice.map(|d| d[r]))).unwrap_or(0.0))
    });
    let hd = tasks[0].then(|| std::array::from_fn(|r| mean(results.iter().filter_map(|c| c.hd.and_then(|h| h[r])))));
    let cls = tasks[1].then(|| {
        let pred: Vec<Grade> = results.iter().map(|c| c.predicted_grade.expect("classifier present")).collect();
        let truth: Vec<Grade> = results.iter().map(|c| c.grade).collect();
        classification_metrics(&pred, &truth)
    });
    let det = tasks[2].then(|| {
        let gts: Vec<Vec<BoxF>> = results.iter().map(|c| vec![c.gt_box]).collect();
        map_sweep(&all_dets, &gts)
    });
    let report = MetricsReport {
        num_cases: cases.len(),
        dice,
        hd,
        hd_percentile,
        acc: cls.map(|c| c.acc),
        sen: cls.and_then(|c| c.sen),
        spe: cls.and_then(|c| c.spe),
        map_sweep: det.map(|d| d.map_sweep),
        map_50: det.map(|d| d.map_50),
        mar_sweep: det.map(|d| d.mar_sweep),
        mar_50: det.map(|d| d.mar_50),
        efficiency,
    };
    Ok((report, results))
}

/// Layer-wise MACs of one inference pass on a `[1, C, S, S, S]` input.
pub fn profile_macs<T: Real>(model: &MultiTaskModel<T>, extent: [usize; 3]) -> Result<Vec<LayerMacs>, PipelineError> {
    let x = zero_input(model, extent);
    let _ng = autograd::no_grad();
    profile::start();
    let res = model.forward(&x);
    let records = profile::finish();
    res?;
    Ok(layer_macs(&records))
}

fn zero_input<T: Real>(model: &MultiTaskModel<T>, extent: [usize; 3]) -> Tensor<T> {
    let c = model.config.encoder.in_channels;
    Tensor::zeros(&[1, c, extent[0], extent[1], extent[2]])
}

/// Parameters, MACs, median latency and checkpoint size of an f32 model.
pub fn measure_efficiency(
    model: &MultiTaskModel<f32>,
    cfg: &RunConfig,
    extent: [usize; 3],
    warmup: usize,
    repeats: usize,
) -> Result<(Efficiency, Vec<LayerMacs>), PipelineError> {
    let rows = profile_macs(model, extent)?;
    let macs = rows.iter().map(|r| r.macs).sum();
    let x = zero_input(model, extent);
    let latency = {
        let _ng = autograd::no_grad();
        median_latency(
            || {
                model.forward(&x).expect("shape already validated");
            },
            warmup,
            repeats,
        )
    };
    let size = super::checkpoint::model_size_bytes(model, cfg)?;
    Ok((Efficiency::new(model.num_params() as u64, macs, latency, size), rows))
}

/// Evaluates preprocessed cases with the latency settings from `cfg.eval`.
pub fn evaluate(
    model: &MultiTaskModel<f32>,
    cfg: &RunConfig,
    cases: &[VolumeSample],
) -> Result<(MetricsReport, Vec<CaseResult>), PipelineError> {
    if cases.is_empty() {
        return Err(PipelineError::EmptySplit);
    }
    let (eff, _) = measure_efficiency(model, cfg, cases[0].spatial_shape(), cfg.eval.latency_warmup, cfg.eval.latency_repeats)?;
    evaluate_cases(model, cases, cfg.data.hd_percentile, eff)
}
