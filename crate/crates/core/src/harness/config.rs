//! Run configuration: one TOML document, overridable key by key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{EnvKind, EnvSpec};
use crate::error::{LabError, Result};
use crate::models::{AeConfig, CswmConfig, ModelConfig, TrainConfig};
use crate::oodgen::SplitKind;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SLOTLAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// Defaults to 5 for grid worlds and 3 for three-body.
    pub num_objects: Option<usize>,
    pub grid_size: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            kind: EnvKind::Shapes,
            num_objects: None,
            grid_size: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub kind: SplitKind,
    pub k: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            kind: SplitKind::Iid,
            k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub steps: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_episodes: 1000,
            eval_episodes: 1000,
            steps: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cswm,
    Ae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Defaults to 2 for grid worlds and 4 for three-body.
    pub embedding_dim: Option<usize>,
    /// Width of every hidden layer (slot encoder, edge and node networks,
    /// autoencoder MLPs).
    pub hidden: usize,
    pub extractor_channels: usize,
    pub margin: f64,
    pub sigma: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cswm,
            embedding_dim: None,
            hidden: 128,
            extractor_channels: 16,
            margin: 1.0,
            sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Defaults to 128 for grid worlds and 100 for three-body.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub save_every: usize,
    /// Continue from the run's checkpoint if one exists.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: None,
            learning_rate: 5e-4,
            save_every: 10,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub horizons: Vec<usize>,
    /// Evaluate every kind × k instead of the configured split only.
    pub sweep: bool,
    /// Kinds to sweep; empty means every out-of-distribution kind that
    /// shares the checkpoint's training assignment.
    pub sweep_kinds: Vec<SplitKind>,
    /// Checkpoint to evaluate; defaults to the run's own.
    pub checkpoint: Option<PathBuf>,
    /// Extra checkpoints for kinds with a different training assignment,
    /// keyed by kind name.
    pub checkpoints: BTreeMap<String, PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            horizons: vec![1, 5, 10],
            sweep: false,
            sweep_kinds: Vec::new(),
            checkpoint: None,
            checkpoints: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    /// Observations whose slot maps are exported as images.
    pub observations: usize,
    /// Observations averaged by the factorization score.
    pub score_samples: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            observations: 8,
            score_samples: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    #[serde(with = "crate::provenance::seed_format")]
    pub seed: u64,
    /// Run directory; not part of the configuration hash.
    pub out_dir: Option<PathBuf>,
    pub env: EnvSection,
    pub split: SplitSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub diagnose: DiagnoseSection,
}

/// Seed offsets so the data streams, initialization and shuffling never
/// share random numbers.
const EVAL_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const TRAIN_SEED_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const INIT_SEED_SALT: u64 = 0x94D0_49BB_1331_11EB;

fn salted(seed: u64, salt: u64) -> u64 {
    seed ^ salt
}

impl LabConfig {
    /// Parses a TOML document after applying `key.path=value` overrides.
    /// Values parse as TOML when possible and fall back to strings.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| LabError::Config(format!("config file: {e}")))?;
        for (key, raw) in overrides {
            set_path(&mut doc, key, parse_value(raw))?;
        }
        let cfg: LabConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.steps == 0 || self.data.train_episodes == 0 || self.data.eval_episodes == 0 {
            return Err(LabError::Config("episode counts and steps must be positive".into()));
        }
        if let Some(&h) = self.eval.horizons.iter().find(|&&h| h == 0 || h > self.data.steps) {
            return Err(LabError::Config(format!(
                "horizon {h} outside 1..={} (episode length)",
                self.data.steps
            )));
        }
        if self.eval.horizons.is_empty() {
            return Err(LabError::Config("at least one horizon required".into()));
        }
        if self.train.epochs == 0 {
            return Err(LabError::Config("epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The configuration without the run location and resume flag, which
    /// never change what an artifact contains.
    pub fn canonical_toml(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.train.resume = false;
        c.to_toml()
    }

    /// Hex SHA-256 (first 16 digits) of [`LabConfig::canonical_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Run directory: `out_dir`, else `$SLOTLAB_OUT`, else `runs`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn env_spec(&self) -> EnvSpec {
        let mut spec = EnvSpec::new(self.env.kind);
        if let Some(k) = self.env.num_objects {
            spec.num_objects = k;
        }
        spec.grid_size = self.env.grid_size;
        spec
    }

    pub fn train_data_seed(&self) -> u64 {
        self.seed
    }

    pub fn eval_data_seed(&self) -> u64 {
        salted(self.seed, EVAL_SEED_SALT)
    }

    pub fn init_seed(&self) -> u64 {
        salted(self.seed, INIT_SEED_SALT)
    }

    pub fn model_config(&self) -> ModelConfig {
        let env = self.env_spec();
        let obs = env.obs_shape();
        let m = &self.model;
        match m.kind {
            ModelKind::Cswm => {
                let mut c = CswmConfig::for_env(env.kind, obs, env.num_objects);
                c.embedding_dim = m.embedding_dim.unwrap_or(c.embedding_dim);
                c.encoder_hidden = m.hidden;
                c.edge_hidden = m.hidden;
                c.node_hidden = m.hidden;
                c.extractor_channels = m.extractor_channels;
                c.margin = m.margin;
                c.sigma = m.sigma;
                ModelConfig::Cswm(c)
            }
            ModelKind::Ae => {
                let mut c = AeConfig::for_env(env.kind, obs, env.num_objects);
                c.embedding_dim = m.embedding_dim.unwrap_or(c.embedding_dim);
                c.hidden = m.hidden;
                c.transition_hidden = m.hidden;
                ModelConfig::Ae(c)
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let default_batch = if self.env.kind == EnvKind::ThreeBody { 100 } else { 128 };
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size.unwrap_or(default_batch),
            learning_rate: self.train.learning_rate,
            seed: salted(self.seed, TRAIN_SEED_SALT),
            save_every: self.train.save_every,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::Config(format!("malformed key '{key}'")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("'{part}' in '{key}' is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
