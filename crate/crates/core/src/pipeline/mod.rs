//! End-to-end workflow: configuration, model assembly, data split,
//! training, evaluation, inference and the ablation grid.

mod checkpoint;
mod config;
mod evaluate;
mod model;
mod split;
mod train;
mod workflow;

pub use config::{Balance, BalanceConfig, DataConfig, EvalConfig, ModelConfig, OptimConfig, RunConfig, Schedule, Variant};
pub use model::{
    build_single_task, image_batch, mask_batch, sharing_summary, ModelOutput, MultiTaskModel, Prediction, SharingSummary,
    CLS_PREFIX, DET_PREFIX, ENCODER_PREFIX, SEG_PREFIX,
};
pub use split::{five_fold_split, Fold};
pub use checkpoint::{load_checkpoint, model_archive, model_size_bytes, save_checkpoint, LoadedCheckpoint, TrainingState};
pub use evaluate::{evaluate, evaluate_cases, measure_efficiency, profile_macs, CaseResult};
pub use workflow::{
    ablate, evaluate_checkpoint, fold_of, infer_case, load_preprocessed, split_cases, train, AblationRun, EvalSplit,
    EvaluationOutput, GradeOutput, InferenceOutput,
};
pub use train::{train_run, StepRecord, TrainOutcome, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};

use std::path::{Path, PathBuf};

pub const NUM_FOLDS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error("split: {0}")]
    Split(String),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
