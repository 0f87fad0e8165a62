//! World models: the slot-structured contrastive model and the autoencoder
//! baseline, their training loop and checkpoints.

pub mod ae;
pub mod checkpoint;
pub mod cswm;
pub mod layers;
pub mod train;

use serde::{Deserialize, Serialize};
use slotlab_tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

use crate::envs::{EnvKind, ACTION_DIM};
use crate::error::{LabError, Result};
use crate::eval::LatentModel;

pub use ae::{ae_loss, AeConfig, AeModel};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint, TrainProgress};
pub use cswm::{contrastive_loss, energy, CswmConfig, CswmModel};
pub use train::{train, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Cswm(CswmConfig),
    Ae(AeConfig),
}

impl ModelConfig {
    pub fn env(&self) -> EnvKind {
        match self {
            ModelConfig::Cswm(c) => c.env,
            ModelConfig::Ae(c) => c.env,
        }
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        match self {
            ModelConfig::Cswm(c) => c.obs_shape,
            ModelConfig::Ae(c) => c.obs_shape,
        }
    }

    pub fn num_slots(&self) -> usize {
        match self {
            ModelConfig::Cswm(c) => c.num_slots,
            ModelConfig::Ae(c) => c.num_slots,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            ModelConfig::Cswm(c) => c.embedding_dim,
            ModelConfig::Ae(c) => c.embedding_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Cswm(_) => "cswm",
            ModelConfig::Ae(_) => "ae",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorldModel<T: Scalar> {
    Cswm(CswmModel<T>),
    Ae(AeModel<T>),
}

impl<T: Scalar> WorldModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Cswm(c) => WorldModel::Cswm(CswmModel::new(c.clone(), seed)?),
            ModelConfig::Ae(c) => WorldModel::Ae(AeModel::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            WorldModel::Cswm(m) => ModelConfig::Cswm(m.config.clone()),
            WorldModel::Ae(m) => ModelConfig::Ae(m.config.clone()),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            WorldModel::Cswm(m) => &m.params,
            WorldModel::Ae(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            WorldModel::Cswm(m) => &mut m.params,
            WorldModel::Ae(m) => &mut m.params,
        }
    }

    /// Training loss for `B` transitions: `frames` is `[2B, C, H, W]`,
    /// `actions` holds `B·K·4` values, `negatives` is a permutation of `0..B`
    /// (used by the contrastive model only).
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        frames: &Tensor<T>,
        actions: Vec<T>,
        negatives: &[usize],
    ) -> Result<Var> {
        let b = negatives.len();
        match self {
            WorldModel::Cswm(m) => {
                let a = Tensor::new(&[b * m.config.num_slots, ACTION_DIM], actions)?;
                m.batch_loss(tape, p, frames, &a, negatives)
            }
            WorldModel::Ae(m) => {
                let a = Tensor::new(&[b, m.config.num_slots * ACTION_DIM], actions)?;
                m.batch_loss(tape, p, frames, &a)
            }
        }
    }
}

impl<T: Scalar> LatentModel for WorldModel<T> {
    fn num_slots(&self) -> usize {
        self.config().num_slots()
    }

    fn slot_dim(&self) -> usize {
        self.config().embedding_dim()
    }

    fn encode_batch(&self, obs: &[f32], n: usize) -> Result<Vec<f32>> {
        let [c, h, w] = self.config().obs_shape();
        let x = Tensor::new(&[n, c, h, w], obs.iter().map(|&v| T::of(v as f64)).collect())
            .map_err(|_| LabError::Dimension(format!("{} values are not {n} observations of {:?}", obs.len(), [c, h, w])))?;
        let mut tape = Tape::new();
        let p = self.params().bind(&mut tape)?;
        let xv = tape.constant(x)?;
        let z = match self {
            WorldModel::Cswm(m) => m.encode_var(&mut tape, &p, xv)?,
            WorldModel::Ae(m) => m.encode_var(&mut tape, &p, xv)?,
        };
        Ok(tape.value(z).data().iter().map(|v| v.as_f64() as f32).collect())
    }

    fn step_batch(&self, z: &[f32], actions: &[f32], n: usize) -> Result<Vec<f32>> {
        let (k, d) = (self.num_slots(), self.slot_dim());
        if z.len() != n * k * d || actions.len() != n * k * ACTION_DIM {
            return Err(LabError::Dimension(format!(
                "step of {n} samples needs {} latent and {} action values, got {} and {}",
                n * k * d,
                n * k * ACTION_DIM,
                z.len(),
                actions.len()
            )));
        }
        let cast = |v: &[f32]| v.iter().map(|&x| T::of(x as f64)).collect::<Vec<T>>();
        let mut tape = Tape::new();
        let p = self.params().bind(&mut tape)?;
        let next = match self {
            WorldModel::Cswm(m) => {
                let zv = tape.constant(Tensor::new(&[n * k, d], cast(z))?)?;
                let av = tape.constant(Tensor::new(&[n * k, ACTION_DIM], cast(actions))?)?;
                let delta = m.transition_var(&mut tape, &p, zv, av)?;
                tape.add(zv, delta)?
            }
            WorldModel::Ae(m) => {
                let zv = tape.constant(Tensor::new(&[n, k * d], cast(z))?)?;
                let av = tape.constant(Tensor::new(&[n, k * ACTION_DIM], cast(actions))?)?;
                let delta = m.transition_var(&mut tape, &p, zv, av)?;
                tape.add(zv, delta)?
            }
        };
        Ok(tape.value(next).data().iter().map(|v| v.as_f64() as f32).collect())
    }
}
