//! Run configuration, read from YAML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataio::AugmentConfig;
use crate::decoders::{ClsHeadConfig, DetectionHeadConfig, Neck, SegHeadConfig};
use crate::encoder::EncoderConfig;
use crate::losses::LossConfig;
use crate::metrics::DEFAULT_HD_PERCENTILE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Multi,
    SegOnly,
    DetOnly,
    ClsOnly,
}

impl Variant {
    /// Which losses are trained, in task order (seg, cls, det).
    pub fn tasks(self) -> [bool; 3] {
        match self {
            Variant::Multi => [true, true, true],
            Variant::SegOnly => [true, false, false],
            Variant::ClsOnly => [false, true, false],
            Variant::DetOnly => [false, false, true],
        }
    }

    /// Which heads are built: (seg, cls, det). The classifier reads the
    /// segmentation output, so a classification-only model keeps a seg head.
    pub fn heads(self) -> [bool; 3] {
        match self {
            Variant::ClsOnly => [true, true, false],
            v => v.tasks(),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Multi => "multi",
            Variant::SegOnly => "seg_only",
            Variant::DetOnly => "det_only",
            Variant::ClsOnly => "cls_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub seg: SegHeadConfig,
    pub det: DetectionHeadConfig,
    pub cls: ClsHeadConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            seg: SegHeadConfig::default(),
            det: DetectionHeadConfig::default(),
            cls: ClsHeadConfig::default(),
            variant: Variant::Multi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Only `adamw` is implemented.
    pub optimizer: String,
    pub lr_encoder: f64,
    pub lr_seg: f64,
    pub lr_det: f64,
    pub lr_cls: f64,
    pub schedule: Schedule,
    /// Final learning rate as a fraction of the base rate.
    pub min_lr_factor: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimiser steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            optimizer: "adamw".into(),
            lr_encoder: 1e-4,
            lr_seg: 1e-4,
            lr_det: 1e-5,
            lr_cls: 1e-5,
            schedule: Schedule::Cosine,
            min_lr_factor: 0.0,
            weight_decay: 1e-5,
            epochs: 300,
            batch_size: 1,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    #[serde(alias = "GradNorm")]
    Gradnorm,
    #[serde(alias = "MGDA")]
    Mgda,
    Fixed,
}

impl std::fmt::Display for Balance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Balance::Gradnorm => "gradnorm",
            Balance::Mgda => "mgda",
            Balance::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    pub method: Balance,
    /// GradNorm asymmetry.
    pub alpha: f64,
    /// GradNorm weight learning rate.
    pub lr_w: f64,
    /// Steps averaged into the initial losses.
    pub l0_window: u64,
    /// Weights used by `fixed`, in task order (seg, cls, det).
    pub fixed_weights: [f64; 3],
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            method: Balance::Gradnorm,
            alpha: 1.5,
            lr_w: 0.025,
            l0_window: 10,
            fixed_weights: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub crop_size: [usize; 3],
    pub normalize_after_crop: bool,
    pub augment: AugmentConfig,
    pub hd_percentile: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            crop_size: [96; 3],
            normalize_after_crop: true,
            augment: AugmentConfig::default(),
            hd_percentile: DEFAULT_HD_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Validate every this many epochs (and after the last).
    pub every_epochs: usize,
    pub latency_repeats: usize,
    pub latency_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every_epochs: 1,
            latency_repeats: 50,
            latency_warmup: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub balance: BalanceConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub fold: usize,
    pub device: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            balance: BalanceConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            fold: 0,
            device: "cpu".into(),
        }
    }
}

impl RunConfig {
    /// A CPU-sized configuration for 32³ phantoms: narrow encoder, window 4,
    /// small neck and classifier, larger learning rates, no augmentation.
    pub fn smoke() -> Self {
        let mut c = RunConfig::default();
        c.model.encoder.embed_dim = 8;
        c.model.encoder.num_heads = vec![2, 4, 8, 16];
        c.model.encoder.window_size = 4;
        c.model.det.neck = Neck::PaNet;
        c.model.det.neck_channels = 16;
        c.model.det.subnet_depth = 2;
        c.model.det.anchor_scales = vec![vec![2.0, 4.0]; 4];
        c.model.cls.growth_rate = 8;
        c.model.cls.init_features = 8;
        c.model.cls.block_config = vec![2, 2, 2, 2];
        c.optim.lr_encoder = 1e-3;
        c.optim.lr_seg = 1e-3;
        c.optim.lr_det = 1e-3;
        c.optim.lr_cls = 1e-3;
        c.optim.weight_decay = 0.0;
        c.optim.min_lr_factor = 0.1;
        c.optim.epochs = 20;
        c.data.crop_size = [32; 3];
        c.data.augment = AugmentConfig::identity();
        c.eval.latency_repeats = 3;
        c.eval.latency_warmup = 1;
        c
    }

    pub fn from_yaml(text: &str) -> Result<Self, PipelineError> {
        let c: RunConfig = serde_yaml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.model.encoder.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.model.det.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.fold >= super::NUM_FOLDS {
            return bad(format!("fold {} outside [0, {})", self.fold, super::NUM_FOLDS));
        }
        if self.device != "cpu" {
            return bad(format!("device {:?} is not available; only \"cpu\" is supported", self.device));
        }
        if self.optim.optimizer.to_ascii_lowercase() != "adamw" {
            return bad(format!("optimizer {:?} is not supported; use adamw", self.optim.optimizer));
        }
        if self.optim.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let o = &self.optim;
        if [o.lr_encoder, o.lr_seg, o.lr_det, o.lr_cls].iter().any(|&lr| !(lr >= 0.0) || !lr.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&o.min_lr_factor) {
            return bad("min_lr_factor must lie in [0, 1]".into());
        }
        let f = self.model.encoder.extent_factor();
        if self.data.crop_size.iter().any(|&s| s == 0 || s % f != 0) {
            return bad(format!("crop size {:?} must be a positive multiple of {f}", self.data.crop_size));
        }
        if !(0.0..=100.0).contains(&self.data.hd_percentile) {
            return bad("hd_percentile must lie in [0, 100]".into());
        }
        if self.balance.fixed_weights.iter().any(|&w| !(w >= 0.0)) {
            return bad("fixed task weights must be non-negative".into());
        }
        self.data.augment.validate().map_err(PipelineError::Config)?;
        Ok(())
    }
}
