//! Dataset-level entry points used by the command line: train, evaluate,
//! infer and the ablation grid.

use std::path::{Path, PathBuf};

use log::info;
use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use super::config::{Balance, RunConfig};
use super::evaluate::{evaluate, CaseResult};
use super::model::MultiTaskModel;
use super::split::{five_fold_split, Fold};
use super::train::{train_run, TrainOutcome};
use super::{load_checkpoint, PipelineError};
use crate::dataio::{center_offsets, load_dataset, load_image, preprocess, preprocess_image, write_label_map};
use crate::datamodel::{BoxF, Detection, Grade, GradePrediction, VolumeSample};
use crate::decoders::Neck;
use crate::metrics::MetricsReport;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

/// Loads every case under `cfg.data.root` and applies crop and normalisation.
pub fn load_preprocessed(cfg: &RunConfig) -> Result<Vec<VolumeSample>, PipelineError> {
    let raw = load_dataset(&cfg.data.root)?;
    raw.iter()
        .map(|s| preprocess(s, cfg.data.crop_size, cfg.data.normalize_after_crop).map_err(PipelineError::from))
        .collect()
}

/// The fold selected by `cfg.fold`.
pub fn fold_of(cfg: &RunConfig, cases: &[VolumeSample]) -> Result<Fold, PipelineError> {
    let ids: Vec<(String, Grade)> = cases.iter().map(|c| (c.case_id.clone(), c.grade)).collect();
    Ok(five_fold_split(&ids, cfg.seed)?.swap_remove(cfg.fold))
}

fn select(cases: &[VolumeSample], ids: &[String]) -> Vec<VolumeSample> {
    cases.iter().filter(|c| ids.contains(&c.case_id)).cloned().collect()
}

pub fn split_cases(cfg: &RunConfig, cases: &[VolumeSample]) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>), PipelineError> {
    let fold = fold_of(cfg, cases)?;
    Ok((select(cases, &fold.train), select(cases, &fold.val)))
}

/// Trains on the configured fold and writes the split next to the checkpoints.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, PipelineError> {
    let cases = load_preprocessed(cfg)?;
    let fold = fold_of(cfg, &cases)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    write_json(&out_dir.join("split.json"), &fold)?;
    train_run(cfg, &select(&cases, &fold.train), &select(&cases, &fold.val), out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub report: MetricsReport,
    pub cases: Vec<CaseResult>,
}

/// Evaluates a checkpoint on one split of the configured fold and writes
/// `report.json` and `cases.json` to `out_dir`.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    overrides: impl FnOnce(&mut RunConfig),
    split: EvalSplit,
    out_dir: &Path,
) -> Result<EvaluationOutput, PipelineError> {
    let loaded = load_checkpoint(checkpoint)?;
    let mut cfg = loaded.config.clone();
    overrides(&mut cfg);
    cfg.validate()?;
    let cases = load_preprocessed(&cfg)?;
    let cases = match split {
        EvalSplit::All => cases,
        EvalSplit::Train => split_cases(&cfg, &cases)?.0,
        EvalSplit::Val => split_cases(&cfg, &cases)?.1,
    };
    let (report, results) = evaluate(&loaded.model, &cfg, &cases)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_json(&out_dir.join("cases.json"), &results)?;
    Ok(EvaluationOutput { report, cases: results })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradeOutput {
    pub grade: Grade,
    pub hgg_probability: f64,
    pub logits: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub case_id: String,
    pub seg_path: Option<PathBuf>,
    /// Boxes in the voxel coordinates of the input volume.
    pub detections: Option<Vec<Detection>>,
    pub grade: Option<GradeOutput>,
}

/// Runs a model on an unlabelled case folder. The segmentation is pasted
/// back into the full volume; boxes are shifted by the crop offset.
pub fn infer_case(
    model: &MultiTaskModel<f32>,
    cfg: &RunConfig,
    case_dir: &Path,
    case_id: &str,
    out_dir: &Path,
) -> Result<InferenceOutput, PipelineError> {
    let image = load_image(case_dir, case_id)?;
    let full = [image.shape()[1], image.shape()[2], image.shape()[3]];
    let crop = cfg.data.crop_size;
    let off = center_offsets(full, crop)?;
    let cropped = preprocess_image(&image, crop, cfg.data.normalize_after_crop)?;
    let sample = VolumeSample {
        case_id: case_id.to_string(),
        image: cropped,
        mask: Array4::zeros((3, crop[0], crop[1], crop[2])),
        grade: Grade::Hgg,
        box_: crate::datamodel::BoundingBox3D::new([0; 3], [1; 3]),
    };
    let anchors = model.anchors(crop);
    let pred = model.predict(&sample, &anchors)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;

    let seg_path = match &pred.mask {
        Some(m) => {
            let mut canvas = Array4::<u8>::zeros((3, full[0], full[1], full[2]));
            canvas
                .slice_mut(s![.., off[0]..off[0] + crop[0], off[1]..off[1] + crop[1], off[2]..off[2] + crop[2]])
                .assign(m);
            let p = out_dir.join(format!("{case_id}_seg.nii.gz"));
            write_label_map(&p, &canvas)?;
            Some(p)
        }
        None => None,
    };
    let shift = off.map(|o| o as f64);
    let detections = pred.detections.map(|ds| {
        ds.into_iter()
            .map(|d| Detection {
                box_: BoxF {
                    min: std::array::from_fn(|i| d.box_.min[i] + shift[i]),
                    max: std::array::from_fn(|i| d.box_.max[i] + shift[i]),
                },
                score: d.score,
            })
            .collect::<Vec<_>>()
    });
    if let Some(d) = &detections {
        write_json(&out_dir.join(format!("{case_id}_detections.json")), d)?;
    }
    let grade = pred.grade.map(|g: GradePrediction| GradeOutput {
        grade: g.grade(),
        hgg_probability: g.probability,
        logits: g.logits,
    });
    if let Some(g) = &grade {
        write_json(&out_dir.join(format!("{case_id}_grade.json")), g)?;
    }
    Ok(InferenceOutput {
        case_id: case_id.to_string(),
        seg_path,
        detections,
        grade,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub neck: Neck,
    pub balance: Balance,
    pub steps: usize,
    pub report: MetricsReport,
}

/// Trains and evaluates every {FPN, PANet} × {GradNorm, MGDA} combination.
/// Each run gets its own subdirectory; `ablation.json` collects the reports.
pub fn ablate(
    cfg: &RunConfig,
    train: &[VolumeSample],
    val: &[VolumeSample],
    out_dir: &Path,
) -> Result<Vec<AblationRun>, PipelineError> {
    if val.is_empty() {
        return Err(PipelineError::EmptySplit);
    }
    let mut runs = Vec::new();
    for neck in [Neck::Fpn, Neck::PaNet] {
        for balance in [Balance::Gradnorm, Balance::Mgda] {
            let mut c = cfg.clone();
            c.model.det.neck = neck;
            c.balance.method = balance;
            let dir = out_dir.join(format!("{neck}_{balance}"));
            info!("ablation run {neck} + {balance}");
            let outcome = train_run(&c, train, val, &dir)?;
            let best = load_checkpoint(&outcome.best_checkpoint)?;
            let (report, cases) = evaluate(&best.model, &c, val)?;
            write_json(&dir.join("report.json"), &report)?;
            write_json(&dir.join("cases.json"), &cases)?;
            runs.push(AblationRun {
                neck,
                balance,
                steps: outcome.steps,
                report,
            });
        }
    }
    write_json(&out_dir.join("ablation.json"), &runs)?;
    Ok(runs)
}
