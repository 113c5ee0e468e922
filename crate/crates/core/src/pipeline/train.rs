//! Optimisation loop with task balancing, logging and checkpoint selection.

use std::path::{Path, PathBuf};

use autograd::optim::{cosine_factor, AdamW, AdamWConfig, ParamGroup};
use autograd::{Gradients, Param, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, TrainingState};
use super::config::{Balance, RunConfig, Schedule, Variant};
use super::evaluate::{evaluate_cases, measure_efficiency};
use super::model::{image_batch, mask_batch, MultiTaskModel, CLS_PREFIX, DET_PREFIX, ENCODER_PREFIX, SEG_PREFIX};
use super::PipelineError;
use crate::dataio::{augment, case_rng};
use crate::datamodel::{Grade, VolumeSample};
use crate::decoders::Anchor;
use crate::losses::{det_targets, detection_loss, dice_loss, focal_loss, frequency_alpha};
use crate::metrics::MetricsReport;
use crate::mtl_optim::{gradnorm_step, mgda_minnorm, MtlError, TaskWeights, NUM_TASKS};

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_seg")]
    pub l_seg: Option<f64>,
    #[serde(rename = "L_cls")]
    pub l_cls: Option<f64>,
    #[serde(rename = "L_det")]
    pub l_det: Option<f64>,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    #[serde(rename = "L_grad")]
    pub l_grad: Option<f64>,
    pub lr: f64,
}

impl StepRecord {
    pub fn losses(&self) -> [Option<f64>; 3] {
        [self.l_seg, self.l_cls, self.l_det]
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: MultiTaskModel<f32>,
    pub optimizer: AdamW<f32>,
    pub weights: TaskWeights,
    pub step: usize,
    pub total_steps: usize,
    anchors: Vec<Anchor>,
    focal_alpha: f64,
    /// Parameters whose per-task gradient norms drive GradNorm.
    balance_params: Vec<Param<f32>>,
    /// Shared parameters over which MGDA solves for the min-norm combination.
    shared_params: Vec<Param<f32>>,
}

impl Trainer {
    /// `train` is used for the step count and class balance only.
    pub fn new(cfg: &RunConfig, model: MultiTaskModel<f32>, train: &[VolumeSample]) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(PipelineError::Other("training split is empty".into()));
        }
        let o = &cfg.optim;
        let group = |name: &str, prefix: &str, lr: f64| ParamGroup {
            name: name.to_string(),
            lr,
            params: model.store.with_prefix(&format!("{prefix}.")),
        };
        let groups = vec![
            group("encoder", ENCODER_PREFIX, o.lr_encoder),
            group("seg", SEG_PREFIX, o.lr_seg),
            group("det", DET_PREFIX, o.lr_det),
            group("cls", CLS_PREFIX, o.lr_cls),
        ];
        let optimizer = AdamW::new(
            groups.into_iter().filter(|g| !g.params.is_empty()).collect(),
            AdamWConfig {
                weight_decay: o.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let per_epoch = train.len().div_ceil(o.batch_size);
        let mut total_steps = o.epochs * per_epoch;
        if let Some(m) = o.max_steps {
            total_steps = total_steps.min(m);
        }
        let n_hgg = train.iter().filter(|s| s.grade == Grade::Hgg).count();
        let focal_alpha = if cfg.loss.focal_alpha_from_frequency {
            frequency_alpha(n_hgg, train.len() - n_hgg)
        } else {
            cfg.loss.focal_alpha
        };
        let extent = cfg.data.crop_size;
        Ok(Trainer {
            anchors: model.anchors(extent),
            balance_params: model.encoder.last_block_params(),
            shared_params: model.encoder_params(),
            model,
            optimizer,
            weights: TaskWeights::new(cfg.balance.alpha, cfg.balance.l0_window),
            step: 0,
            total_steps,
            focal_alpha,
            cfg: cfg.clone(),
        })
    }

    pub fn lr_factor(&self) -> f64 {
        match self.cfg.optim.schedule {
            Schedule::Cosine => cosine_factor(self.step, self.total_steps, self.cfg.optim.min_lr_factor),
            Schedule::Constant => 1.0,
        }
    }

    fn balancing(&self) -> Option<Balance> {
        (self.model.variant() == Variant::Multi).then_some(self.cfg.balance.method)
    }

    /// Task losses of one batch as graph tensors, in task order.
    pub fn losses(&self, batch: &[&VolumeSample]) -> Result<[Option<Tensor<f32>>; NUM_TASKS], PipelineError> {
        let x = image_batch::<f32>(batch);
        let out = self.model.forward(&x)?;
        let tasks = self.model.variant().tasks();
        let lc = &self.cfg.loss;
        let seg = match (&out.seg_logits, tasks[0]) {
            (Some(l), true) => Some(dice_loss(&l.sigmoid(), &mask_batch(batch), lc.dice_smooth)),
            _ => None,
        };
        let cls = match (&out.cls_logits, tasks[1]) {
            (Some(l), true) => {
                let targets: Vec<usize> = batch.iter().map(|s| s.grade.index()).collect();
                Some(focal_loss(l, &targets, lc.focal_gamma, self.focal_alpha))
            }
            _ => None,
        };
        let det = match (&out.det, tasks[2]) {
            (Some(d), true) => {
                let dc = &self.cfg.model.det;
                let targets: Vec<_> = batch
                    .iter()
                    .map(|s| det_targets(&self.anchors, &s.box_.to_real(), dc.iou_pos, dc.iou_neg))
                    .collect();
                Some(detection_loss(d, &targets, lc))
            }
            _ => None,
        };
        Ok([seg, cls, det])
    }

    /// One optimiser step. Each task loss is differentiated separately; the
    /// update uses their weighted sum, and the per-task gradients feed the
    /// balancing rule.
    pub fn train_step(&mut self, batch: &[&VolumeSample]) -> Result<StepRecord, PipelineError> {
        let parts = self.losses(batch)?;
        let values: [Option<f64>; 3] = std::array::from_fn(|i| parts[i].as_ref().map(|t| t.item() as f64));
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PipelineError::NonFinite {
                step: self.step,
                detail: format!(
                    "L_seg={:?} L_cls={:?} L_det={:?} weights={:?} lr_factor={}",
                    values[0],
                    values[1],
                    values[2],
                    self.weights.w,
                    self.lr_factor()
                ),
            });
        }
        let grads: [Option<Gradients<f32>>; 3] = std::array::from_fn(|i| parts[i].as_ref().map(Tensor::backward));
        drop(parts);

        let w = match self.balancing() {
            None => [1.0; 3],
            Some(Balance::Fixed) => self.cfg.balance.fixed_weights,
            Some(Balance::Gradnorm) => self.weights.w,
            Some(Balance::Mgda) => self.mgda_weights(&grads)?,
        };
        let terms: Vec<(f32, &Gradients<f32>)> = grads
            .iter()
            .zip(w)
            .filter_map(|(g, wi)| g.as_ref().map(|g| (wi as f32, g)))
            .collect();
        let combined = Gradients::weighted_sum(&terms);
        if !combined.all_finite() {
            return Err(PipelineError::NonFinite {
                step: self.step,
                detail: format!("gradient has non-finite entries (losses {values:?}, weights {w:?})"),
            });
        }
        let lr_factor = self.lr_factor();
        self.optimizer.step(&combined, lr_factor);

        let mut l_grad = None;
        if self.balancing() == Some(Balance::Gradnorm) {
            let losses = values.map(|v| v.expect("multi-task model has all three losses"));
            if self.weights.l0.is_none() {
                self.weights.observe_initial(losses);
            } else {
                let raw = grads.each_ref().map(|g| {
                    (g.as_ref().expect("all tasks").sq_norm_over(&self.balance_params) as f64).sqrt()
                });
                let s = gradnorm_step(&mut self.weights, losses, raw, self.cfg.balance.lr_w)
                    .map_err(|e| PipelineError::Model(format!("GradNorm: {e}")))?;
                l_grad = Some(s.l_grad);
            }
        }
        let rec = StepRecord {
            step: self.step,
            l_seg: values[0],
            l_cls: values[1],
            l_det: values[2],
            w1: w[0],
            w2: w[1],
            w3: w[2],
            l_grad,
            lr: self.cfg.optim.lr_encoder * lr_factor,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Min-norm convex combination over the shared encoder, scaled so the
    /// weights sum to the number of tasks.
    fn mgda_weights(&self, grads: &[Option<Gradients<f32>>; 3]) -> Result<[f64; 3], PipelineError> {
        let flat: Vec<Vec<f64>> = grads
            .iter()
            .map(|g| {
                g.as_ref()
                    .expect("all tasks")
                    .flatten_over(&self.shared_params)
                    .into_iter()
                    .map(f64::from)
                    .collect()
            })
            .collect();
        match mgda_minnorm(&flat) {
            Ok(c) => Ok([0, 1, 2].map(|i| NUM_TASKS as f64 * c[i])),
            Err(MtlError::ZeroGradients) => {
                warn!("step {}: all shared gradients are zero; using equal weights", self.step);
                Ok([1.0; 3])
            }
            Err(e) => Err(PipelineError::Model(format!("MGDA: {e}"))),
        }
    }

    pub fn state(&self, epoch: usize, score: Option<f64>) -> TrainingState<'_> {
        TrainingState {
            optimizer: &self.optimizer,
            weights: &self.weights,
            step: self.step,
            epoch,
            score,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_report: Option<MetricsReport>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on `train`, validating on `val` to keep the best checkpoint.
/// All artefacts go to `out_dir`.
pub fn train_run(
    cfg: &RunConfig,
    train: &[VolumeSample],
    val: &[VolumeSample],
    out_dir: &Path,
) -> Result<TrainOutcome, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.yaml");
    std::fs::write(&cfg_path, cfg.to_yaml()).map_err(|e| PipelineError::io(&cfg_path, e))?;
    let model = MultiTaskModel::<f32>::new(&cfg.model, cfg.seed)?;
    let mut trainer = Trainer::new(cfg, model, train)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| PipelineError::Other(format!("{}: {e}", log_path.display())))?;
    let csv_err = |e: csv::Error| PipelineError::Other(format!("training log: {e}"));

    let efficiency = if val.is_empty() {
        None
    } else {
        Some(measure_efficiency(&trainer.model, cfg, cfg.data.crop_size, cfg.eval.latency_warmup, cfg.eval.latency_repeats)?.0)
    };
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut best: Option<(f64, usize, MetricsReport)> = None;
    let bs = cfg.optim.batch_size;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let epochs = cfg.optim.epochs;
    info!("training {} cases for up to {} steps", train.len(), trainer.total_steps);
    'epochs: for epoch in 0..epochs {
        if trainer.step >= trainer.total_steps {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        for chunk in order.chunks(bs) {
            if trainer.step >= trainer.total_steps {
                break 'epochs;
            }
            let augmented: Vec<VolumeSample> = chunk
                .iter()
                .map(|&i| {
                    let key = format!("{}#{epoch}", train[i].case_id);
                    augment(&train[i], &cfg.data.augment, &mut case_rng(cfg.seed, &key))
                })
                .collect();
            let batch: Vec<&VolumeSample> = augmented.iter().collect();
            let rec = trainer.train_step(&batch)?;
            log.serialize(&rec).map_err(csv_err)?;
        }
        log.flush().map_err(|e| PipelineError::io(&log_path, e))?;
        let last_epoch = epoch + 1 == epochs || trainer.step >= trainer.total_steps;
        if let Some(eff) = efficiency {
            if (epoch + 1) % cfg.eval.every_epochs.max(1) == 0 || last_epoch {
                let (report, _) = evaluate_cases(&trainer.model, val, cfg.data.hd_percentile, eff)?;
                let score = report.selection_score();
                info!("epoch {epoch}: step {} validation score {score:.4}", trainer.step);
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    save_checkpoint(&best_path, &trainer.model, cfg, Some(&trainer.state(epoch, Some(score))))?;
                    best = Some((score, epoch, report));
                }
            }
        }
    }
    log.flush().map_err(|e| PipelineError::io(&log_path, e))?;
    save_checkpoint(&last_path, &trainer.model, cfg, Some(&trainer.state(epochs, None)))?;
    if best.is_none() {
        std::fs::copy(&last_path, &best_path).map_err(|e| PipelineError::io(&best_path, e))?;
    }
    if let Some((_, _, r)) = &best {
        let p = out_dir.join("best_report.json");
        std::fs::write(&p, serde_json::to_string_pretty(r).expect("plain data")).map_err(|e| PipelineError::io(&p, e))?;
    }
    Ok(TrainOutcome {
        steps: trainer.step,
        best_epoch: best.as_ref().map(|b| b.1),
        best_report: best.map(|b| b.2),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log: log_path,
    })
}
