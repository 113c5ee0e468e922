//! Safetensors checkpoints: weights, optimiser moments and run metadata.

use std::path::Path;

use autograd::optim::AdamW;
use autograd::serialize::Archive;

use super::config::RunConfig;
use super::model::MultiTaskModel;
use super::PipelineError;
use crate::mtl_optim::TaskWeights;

pub const MODEL_PREFIX: &str = "model.";
pub const OPTIM_PREFIX: &str = "optim.";

fn ckpt_err(path: &Path, message: impl ToString) -> PipelineError {
    PipelineError::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Weights plus the config needed to rebuild the model.
pub fn model_archive(model: &MultiTaskModel<f32>, cfg: &RunConfig) -> Archive<f32> {
    let mut a = Archive::new();
    a.insert_store(MODEL_PREFIX, &model.store);
    a.metadata.insert("config".into(), cfg.to_yaml());
    a
}

/// Serialized size of the weights-only checkpoint.
pub fn model_size_bytes(model: &MultiTaskModel<f32>, cfg: &RunConfig) -> Result<u64, PipelineError> {
    let bytes = model_archive(model, cfg).to_bytes().map_err(|e| PipelineError::Model(e.to_string()))?;
    Ok(bytes.len() as u64)
}

pub struct TrainingState<'a> {
    pub optimizer: &'a AdamW<f32>,
    pub weights: &'a TaskWeights,
    pub step: usize,
    pub epoch: usize,
    pub score: Option<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &MultiTaskModel<f32>,
    cfg: &RunConfig,
    state: Option<&TrainingState<'_>>,
) -> Result<(), PipelineError> {
    let mut a = model_archive(model, cfg);
    if let Some(st) = state {
        st.optimizer.save_state(&mut a, OPTIM_PREFIX);
        a.metadata.insert(
            "task_weights".into(),
            serde_json::to_string(st.weights).expect("plain data"),
        );
        a.metadata.insert("step".into(), st.step.to_string());
        a.metadata.insert("epoch".into(), st.epoch.to_string());
        if let Some(s) = st.score {
            a.metadata.insert("score".into(), s.to_string());
        }
    }
    a.save(path).map_err(|e| ckpt_err(path, e))
}

pub struct LoadedCheckpoint {
    pub model: MultiTaskModel<f32>,
    pub config: RunConfig,
    pub archive: Archive<f32>,
}

impl LoadedCheckpoint {
    pub fn task_weights(&self) -> Option<TaskWeights> {
        serde_json::from_str(self.archive.metadata.get("task_weights")?).ok()
    }

    pub fn step(&self) -> usize {
        self.archive.metadata.get("step").and_then(|s| s.parse().ok()).unwrap_or(0)
    }
}

/// Rebuilds the model from the stored config and copies the weights in.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, PipelineError> {
    let archive = Archive::<f32>::load(path).map_err(|e| ckpt_err(path, e))?;
    let text = archive
        .metadata
        .get("config")
        .ok_or_else(|| ckpt_err(path, "no config in metadata"))?;
    let config = RunConfig::from_yaml(text)?;
    let model = MultiTaskModel::new(&config.model, config.seed)?;
    archive.load_store(MODEL_PREFIX, &model.store).map_err(|e| ckpt_err(path, e))?;
    Ok(LoadedCheckpoint { model, config, archive })
}
