//! Mini-batch training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotlab_tensor::{AdamConfig, AdamState, Tape, Tensor, TensorError};

use super::WorldModel;
use crate::envs::ExperienceBuffer;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Drives shuffling and negative sampling; epoch `e` uses stream `e + 1`
    /// of this seed, so a resumed run replays exactly.
    #[serde(with = "crate::provenance::seed_format")]
    pub seed: u64,
    /// Call the epoch hook's save path every this many epochs (0 = only at the end).
    pub save_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 5e-4,
            seed: 0,
            save_every: 10,
        }
    }
}

/// Optimizer state and per-epoch mean losses so far.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    pub epoch_losses: Vec<f64>,
}

impl TrainState {
    pub fn fresh(model: &WorldModel<f32>, cfg: &TrainConfig) -> Self {
        Self {
            adam: AdamState::new(
                AdamConfig {
                    lr: cfg.learning_rate,
                    ..AdamConfig::default()
                },
                model.params(),
            ),
            epoch_losses: Vec::new(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch_losses.len()
    }
}

/// Observations of a buffer converted once to `[C,H,W]` floats.
struct Frames {
    frame_len: usize,
    data: Vec<Vec<f32>>,
    /// `(episode, step)` for every transition.
    index: Vec<(usize, usize)>,
    actions: Vec<Vec<Vec<f32>>>,
}

impl Frames {
    fn new(buffer: &ExperienceBuffer) -> Self {
        let [c, h, w] = buffer.env.obs_shape();
        let frame_len = c * h * w;
        let mut data = Vec::with_capacity(buffer.episodes.len());
        let mut index = Vec::new();
        let mut actions = Vec::with_capacity(buffer.episodes.len());
        for (e, ep) in buffer.episodes.iter().enumerate() {
            let mut frames = Vec::with_capacity(frame_len * ep.observations.len());
            for t in 0..ep.observations.len() {
                buffer.push_observation(e, t, &mut frames);
            }
            data.push(frames);
            actions.push((0..ep.len()).map(|t| buffer.action_vector(e, t)).collect());
            index.extend((0..ep.len()).map(|t| (e, t)));
        }
        Self {
            frame_len,
            data,
            index,
            actions,
        }
    }

    fn frame(&self, e: usize, t: usize) -> &[f32] {
        &self.data[e][t * self.frame_len..(t + 1) * self.frame_len]
    }

    fn batch(&self, items: &[(usize, usize)], obs_shape: [usize; 3]) -> Result<(Tensor<f32>, Vec<f32>)> {
        let b = items.len();
        let mut frames = Vec::with_capacity(2 * b * self.frame_len);
        for &(e, t) in items {
            frames.extend_from_slice(self.frame(e, t));
        }
        for &(e, t) in items {
            frames.extend_from_slice(self.frame(e, t + 1));
        }
        let [c, h, w] = obs_shape;
        let actions = items.iter().flat_map(|&(e, t)| self.actions[e][t].iter().copied()).collect();
        Ok((Tensor::new(&[2 * b, c, h, w], frames)?, actions))
    }
}

fn numeric(epoch: usize, batch: usize) -> impl Fn(LabError) -> LabError {
    move |err| match err {
        LabError::Tensor(TensorError::NonFinite { op }) => LabError::NonFiniteLoss {
            epoch,
            batch,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Trains until `cfg.epochs` epochs are done, continuing from `resume` if
/// given. `on_epoch` runs after every epoch with the 1-based epoch number.
pub fn train(
    model: &mut WorldModel<f32>,
    buffer: &ExperienceBuffer,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(usize, &WorldModel<f32>, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    if buffer.num_transitions() == 0 {
        return Err(LabError::Contract("training buffer holds no transitions".into()));
    }
    if cfg.batch_size == 0 {
        return Err(LabError::Config("batch size must be positive".into()));
    }
    let obs_shape = model.config().obs_shape();
    if obs_shape != buffer.env.obs_shape() || model.config().num_slots() != buffer.env.num_objects {
        return Err(LabError::Mismatch(format!(
            "model expects {:?} observations with {} slots, buffer holds {:?} with {} objects",
            obs_shape,
            model.config().num_slots(),
            buffer.env.obs_shape(),
            buffer.env.num_objects
        )));
    }
    let data = Frames::new(buffer);
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(model, cfg));
    for epoch in state.epochs_done()..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = data.index.clone();
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (bi, items) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = numeric(epoch + 1, bi);
            let mut negatives: Vec<usize> = (0..items.len()).collect();
            negatives.shuffle(&mut rng);
            let (frames, actions) = data.batch(items, obs_shape)?;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape)?;
            let loss = model
                .batch_loss(&mut tape, &p, &frames, actions, &negatives)
                .map_err(&wrap)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(LabError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    detail: format!("loss = {value}"),
                });
            }
            let grads = tape.backward(loss).map_err(|e| wrap(e.into()))?;
            model.params_mut().accumulate(&p, &grads)?;
            state.adam.step(model.params_mut())?;
            if model.params().iter().any(|(_, t)| !t.is_finite()) {
                return Err(LabError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    detail: "parameters became non-finite after the update".into(),
                });
            }
            total += value * items.len() as f64;
            count += items.len();
        }
        state.epoch_losses.push(total / count as f64);
        on_epoch(epoch + 1, model, &state)?;
    }
    Ok(state)
}
