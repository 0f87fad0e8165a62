//! Model checkpoints: parameters, optimizer moments and loss history in the
//! tensor checkpoint container, with a TOML preamble describing the
//! architecture, training progress and provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slotlab_tensor::{AdamConfig, AdamState, Checkpoint, Entry};

use super::train::TrainConfig;
use super::{ModelConfig, WorldModel};
use crate::error::{LabError, Result};
use crate::provenance::Provenance;

const LOSS_ENTRY: &str = "training.epoch_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_done: usize,
    pub adam_step: u64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<TrainProgress>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: WorldModel<f32>,
    pub meta: CheckpointMeta,
    pub adam: Option<AdamState<f32>>,
    pub losses: Vec<f64>,
}

pub fn checkpoint_bytes(
    model: &WorldModel<f32>,
    meta: &CheckpointMeta,
    adam: Option<&AdamState<f32>>,
    losses: &[f64],
) -> Result<Vec<u8>> {
    if meta.model != model.config() {
        return Err(LabError::Contract("checkpoint preamble describes a different model".into()));
    }
    let preamble = toml::to_string(meta).map_err(|e| LabError::Format(format!("checkpoint preamble: {e}")))?;
    let mut entries = model.params().to_entries();
    if let Some(adam) = adam {
        entries.extend(adam.to_entries(model.params()));
    }
    entries.push(Entry::from_slice(LOSS_ENTRY, &[losses.len()], losses));
    Ok(Checkpoint { preamble, entries }.to_bytes())
}

/// Writes the checkpoint through a temporary file so a crash never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(
    path: &Path,
    model: &WorldModel<f32>,
    meta: &CheckpointMeta,
    adam: Option<&AdamState<f32>>,
    losses: &[f64],
) -> Result<()> {
    let bytes = checkpoint_bytes(model, meta, adam, losses)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let ckpt = Checkpoint::from_bytes(bytes)?;
    let meta: CheckpointMeta =
        toml::from_str(&ckpt.preamble).map_err(|e| LabError::Format(format!("checkpoint preamble: {e}")))?;
    let mut model = WorldModel::<f32>::new(&meta.model, 0)?;
    model.params_mut().load_entries(&ckpt.entries)?;
    let adam = match &meta.progress {
        Some(p) => Some(AdamState::from_entries(
            AdamConfig {
                lr: p.train.learning_rate,
                ..AdamConfig::default()
            },
            p.adam_step,
            model.params(),
            &ckpt.entries,
        )?),
        None => None,
    };
    let losses = ckpt.entry(LOSS_ENTRY).map(|e| e.to_vec::<f64>()).unwrap_or_default();
    Ok(LoadedCheckpoint {
        model,
        meta,
        adam,
        losses,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode_checkpoint(&bytes)
}
