//! Contrastive structured world model: per-object feature maps, a shared
//! per-slot encoder and a graph transition network trained with an energy
//! hinge loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotlab_tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

use super::layers::{Conv, HiddenMlp};
use crate::envs::{EnvKind, ACTION_DIM};
use crate::error::{LabError, Result};

/// Negative slope of the leaky relu inside the two-layer extractor.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CswmConfig {
    pub env: EnvKind,
    /// `[channels, height, width]` of an observation.
    pub obs_shape: [usize; 3],
    pub num_slots: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: usize,
    /// Hidden width of the edge network, also the edge embedding size.
    pub edge_hidden: usize,
    pub node_hidden: usize,
    /// Channels of the first convolution of the two-layer extractor.
    pub extractor_channels: usize,
    pub margin: f64,
    pub sigma: f64,
}

impl CswmConfig {
    pub fn for_env(env: EnvKind, obs_shape: [usize; 3], num_slots: usize) -> Self {
        Self {
            env,
            obs_shape,
            num_slots,
            embedding_dim: if env == EnvKind::ThreeBody { 4 } else { 2 },
            encoder_hidden: 512,
            edge_hidden: 512,
            node_hidden: 512,
            extractor_channels: 16,
            margin: 1.0,
            sigma: 0.5,
        }
    }

    /// Whether the extractor is a single 10×10 stride-10 convolution (grid
    /// worlds) or the two-layer variant (three-body).
    pub fn single_layer_extractor(&self) -> bool {
        self.env != EnvKind::ThreeBody
    }

    /// Spatial extent `[h, w]` of each slot map.
    pub fn map_shape(&self) -> [usize; 2] {
        let [_, h, w] = self.obs_shape;
        if self.single_layer_extractor() {
            [(h - 10) / 10 + 1, (w - 10) / 10 + 1]
        } else {
            [(h - 5) / 5 + 1, (w - 5) / 5 + 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.obs_shape;
        let min = if self.single_layer_extractor() { 10 } else { 5 };
        if c == 0 || h < min || w < min {
            return Err(LabError::Config(format!("observation {:?} too small", self.obs_shape)));
        }
        if self.num_slots == 0 || self.embedding_dim == 0 {
            return Err(LabError::Config("need at least one slot and one latent dimension".into()));
        }
        if self.encoder_hidden < 2 || self.edge_hidden < 2 || self.node_hidden < 2 {
            return Err(LabError::Config("hidden widths must be at least 2 (layer norm)".into()));
        }
        if !(self.sigma > 0.0) || !(self.margin >= 0.0) {
            return Err(LabError::Config("sigma must be positive and margin non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layers {
    conv1: Conv,
    conv2: Option<Conv>,
    encoder: HiddenMlp,
    edge: HiddenMlp,
    node: HiddenMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CswmModel<T: Scalar> {
    pub config: CswmConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Ordered pairs `(i, j)`, `i ≠ j`, of every sample as flat row indices.
fn edge_index(samples: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(samples * k * k.saturating_sub(1));
    let mut dst = Vec::with_capacity(src.capacity());
    for b in 0..samples {
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    src.push(b * k + i);
                    dst.push(b * k + j);
                }
            }
        }
    }
    (src, dst)
}

impl<T: Scalar> CswmModel<T> {
    /// Fresh model; the last node layer starts at zero so the initial
    /// transition is the identity.
    pub fn new(config: CswmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (k, d, c) = (config.num_slots, config.embedding_dim, config.obs_shape[0]);
        let (conv1, conv2) = if config.single_layer_extractor() {
            (Conv::new(&mut store, "extractor.conv1", c, k, 10, 10, 0, &mut rng), None)
        } else {
            let ch = config.extractor_channels;
            (
                Conv::new(&mut store, "extractor.conv1", c, ch, 9, 1, 4, &mut rng),
                Some(Conv::new(&mut store, "extractor.conv2", ch, k, 5, 5, 0, &mut rng)),
            )
        };
        let [mh, mw] = config.map_shape();
        let encoder = HiddenMlp::new(&mut store, "encoder", [mh * mw, config.encoder_hidden, d], false, &mut rng);
        let edge = HiddenMlp::new(
            &mut store,
            "transition.edge",
            [2 * d, config.edge_hidden, config.edge_hidden],
            false,
            &mut rng,
        );
        let node = HiddenMlp::new(
            &mut store,
            "transition.node",
            [d + ACTION_DIM + config.edge_hidden, config.node_hidden, d],
            true,
            &mut rng,
        );
        Ok(Self {
            config,
            params: store,
            layers: Layers {
                conv1,
                conv2,
                encoder,
                edge,
                node,
            },
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> CswmModel<U> {
        CswmModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers,
        }
    }

    fn check_obs(&self, shape: &[usize]) -> Result<usize> {
        let (n, chw) = match shape.len() {
            3 => (1, shape),
            4 => (shape[0], &shape[1..]),
            _ => {
                return Err(LabError::Dimension(format!(
                    "observation must be [C,H,W] or [N,C,H,W], got {shape:?}"
                )))
            }
        };
        if chw != self.config.obs_shape {
            return Err(LabError::Dimension(format!(
                "observation {chw:?} does not match model input {:?}",
                self.config.obs_shape
            )));
        }
        Ok(n)
    }

    /// Sigmoid slot maps `[N, K, h, w]` from observations `[N, C, H, W]`.
    pub fn extract_masks_var(&self, tape: &mut Tape<T>, p: &Bound, obs: Var) -> Result<Var> {
        let n = self.check_obs(tape.shape(obs))?;
        let mut h = self.layers.conv1.forward(tape, p, obs)?;
        if let Some(conv2) = &self.layers.conv2 {
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            h = conv2.forward(tape, p, h)?;
        }
        let h = tape.sigmoid(h)?;
        let [mh, mw] = self.config.map_shape();
        Ok(tape.reshape(h, &[n, self.config.num_slots, mh, mw])?)
    }

    /// Latent rows `[N·K, D]` from slot maps `[N, K, h, w]` or `[K, h, w]`.
    pub fn encode_slots_var(&self, tape: &mut Tape<T>, p: &Bound, masks: Var) -> Result<Var> {
        let [mh, mw] = self.config.map_shape();
        let k = self.config.num_slots;
        let shape = tape.shape(masks).to_vec();
        let tail = &shape[shape.len().saturating_sub(3)..];
        if shape.len() < 3 || shape.len() > 4 || tail != [k, mh, mw] {
            return Err(LabError::Dimension(format!(
                "slot maps must end in [{k}, {mh}, {mw}], got {shape:?}"
            )));
        }
        let rows = shape.iter().product::<usize>() / (mh * mw);
        let flat = tape.reshape(masks, &[rows, mh * mw])?;
        self.layers.encoder.forward(tape, p, flat)
    }

    pub fn encode_var(&self, tape: &mut Tape<T>, p: &Bound, obs: Var) -> Result<Var> {
        let masks = self.extract_masks_var(tape, p, obs)?;
        self.encode_slots_var(tape, p, masks)
    }

    /// Update `Δ` (rows `[N·K, D]`) for latents `z` `[N·K, D]` and per-slot
    /// actions `a` `[N·K, 4]`.
    pub fn transition_var(&self, tape: &mut Tape<T>, p: &Bound, z: Var, a: Var) -> Result<Var> {
        let (k, d) = (self.config.num_slots, self.config.embedding_dim);
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != d || !zs[0].is_multiple_of(k) {
            return Err(LabError::Dimension(format!(
                "latent rows must be [N*{k}, {d}], got {zs:?}"
            )));
        }
        if tape.shape(a) != [zs[0], ACTION_DIM] {
            return Err(LabError::Dimension(format!(
                "actions must be [{}, {ACTION_DIM}], got {:?}",
                zs[0],
                tape.shape(a)
            )));
        }
        let rows = zs[0];
        let e = self.config.edge_hidden;
        let agg = if k > 1 {
            let (src, dst) = edge_index(rows / k, k);
            let zi = tape.gather_rows(z, &src)?;
            let zj = tape.gather_rows(z, &dst)?;
            let pair = tape.concat(&[zi, zj])?;
            let msg = self.layers.edge.forward(tape, p, pair)?;
            tape.scatter_add_rows(msg, &src, rows)?
        } else {
            tape.constant(Tensor::zeros(&[rows, e]))?
        };
        let input = tape.concat(&[z, a, agg])?;
        self.layers.node.forward(tape, p, input)
    }

    fn run<R>(&self, f: impl FnOnce(&mut Tape<T>, &Bound) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        f(&mut tape, &p)
    }

    /// Slot maps for `[C,H,W]` (→ `[K,h,w]`) or `[N,C,H,W]` (→ `[N,K,h,w]`).
    pub fn extract_masks(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(|tape, p| {
            let batched = obs.ndim() == 4;
            let x = tape.constant(obs.clone())?;
            let m = self.extract_masks_var(tape, p, x)?;
            let v = tape.value(m);
            Ok(if batched { v.clone() } else { v.reshape(&v.shape()[1..])? })
        })
    }

    /// Slot latents `[K,D]` (or `[N,K,D]`) from slot maps.
    pub fn encode_slots(&self, masks: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(|tape, p| {
            let m = tape.constant(masks.clone())?;
            let z = self.encode_slots_var(tape, p, m)?;
            let mut shape = masks.shape()[..masks.ndim() - 2].to_vec();
            shape.push(self.config.embedding_dim);
            Ok(tape.value(z).reshape(&shape)?)
        })
    }

    /// Slot latents `[K,D]` (or `[N,K,D]`) from observations.
    pub fn encode(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let masks = self.extract_masks(obs)?;
        self.encode_slots(&masks)
    }

    /// Transition update for `z` `[K,D]`/`[N,K,D]` and actions `[K,4]`/`[N,K,4]`.
    pub fn transition(&self, z: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.config.embedding_dim;
        if z.ndim() < 2 || a.ndim() != z.ndim() {
            return Err(LabError::Dimension(format!(
                "latent {:?} and actions {:?} must both be [K,·] or [N,K,·]",
                z.shape(),
                a.shape()
            )));
        }
        self.run(|tape, p| {
            let zr = tape.constant(z.reshape(&[z.len() / d.max(1), d])?)?;
            let ar = tape.constant(a.reshape(&[a.len() / ACTION_DIM, ACTION_DIM])?)?;
            let delta = self.transition_var(tape, p, zr, ar)?;
            Ok(tape.value(delta).reshape(z.shape())?)
        })
    }

    /// Training objective on one batch (see [`CswmModel::batch_loss`]) for
    /// plain tensors; returns the loss value.
    pub fn loss(&self, frames: &Tensor<T>, actions: &Tensor<T>, negatives: &[usize]) -> Result<T> {
        self.run(|tape, p| {
            let l = self.batch_loss(tape, p, frames, actions, negatives)?;
            Ok(tape.value(l).item()?)
        })
    }

    /// Contrastive loss for a batch of `B` transitions. `frames` stacks the
    /// `B` observations followed by the `B` next observations
    /// (`[2B, C, H, W]`); `actions` is `[B·K, 4]`; `negatives[b]` names the
    /// sample whose next state serves as the negative for sample `b`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        frames: &Tensor<T>,
        actions: &Tensor<T>,
        negatives: &[usize],
    ) -> Result<Var> {
        let b = negatives.len();
        if b == 0 {
            return Err(LabError::Contract("contrastive loss on an empty batch".into()));
        }
        if frames.shape().first() != Some(&(2 * b)) {
            return Err(LabError::Dimension(format!(
                "frames {:?} must hold 2×{b} observations",
                frames.shape()
            )));
        }
        let k = self.config.num_slots;
        let x = tape.constant(frames.clone())?;
        let a = tape.constant(actions.clone())?;
        let z_all = self.encode_var(tape, p, x)?;
        let z = tape.gather_rows(z_all, &(0..b * k).collect::<Vec<_>>())?;
        let z_next = tape.gather_rows(z_all, &(b * k..2 * b * k).collect::<Vec<_>>())?;
        let neg_rows: Vec<usize> = negatives
            .iter()
            .flat_map(|&n| (0..k).map(move |s| (b + n) * k + s))
            .collect();
        if neg_rows.iter().any(|&r| r >= 2 * b * k) {
            return Err(LabError::Contract("negative index outside the batch".into()));
        }
        let z_neg = tape.gather_rows(z_all, &neg_rows)?;
        let delta = self.transition_var(tape, p, z, a)?;
        let z_pred = tape.add(z, delta)?;
        contrastive_loss_var(tape, z_pred, z_next, z_neg, k, self.config.margin, self.config.sigma)
    }
}

/// Per-sample energies `[N]` between latent rows `[N·K, D]`:
/// `(1/2σ²) · mean_k ‖a_k − b_k‖²`.
pub fn energy_var<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, k: usize, sigma: f64) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let per_slot = tape.sum_last(sq)?;
    let rows = tape.shape(per_slot)[0];
    if k == 0 || !rows.is_multiple_of(k) {
        return Err(LabError::Dimension(format!("{rows} latent rows do not split into {k} slots")));
    }
    let grouped = tape.reshape(per_slot, &[rows / k, k])?;
    let mean = tape.mean_last(grouped)?;
    Ok(tape.scale(mean, 1.0 / (2.0 * sigma * sigma))?)
}

/// `mean_b H(z_pred, z_next) + mean_b max(0, γ − H(z_neg, z_next))`.
pub fn contrastive_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    z_pred: Var,
    z_next: Var,
    z_neg: Var,
    k: usize,
    margin: f64,
    sigma: f64,
) -> Result<Var> {
    if tape.shape(z_pred).first().copied().unwrap_or(0) == 0 {
        return Err(LabError::Contract("contrastive loss on an empty batch".into()));
    }
    let pos = energy_var(tape, z_pred, z_next, k, sigma)?;
    let neg = energy_var(tape, z_neg, z_next, k, sigma)?;
    let neg = tape.scale(neg, -1.0)?;
    let neg = tape.add_scalar(neg, margin)?;
    let hinge = tape.relu(neg)?;
    let pos = tape.mean(pos)?;
    let hinge = tape.mean(hinge)?;
    Ok(tape.add(pos, hinge)?)
}

/// Energy of two `[K, D]` latents.
pub fn energy<T: Scalar>(z_pred: &Tensor<T>, z_target: &Tensor<T>, sigma: f64) -> Result<f64> {
    if z_pred.shape() != z_target.shape() || z_pred.ndim() != 2 {
        return Err(LabError::Dimension(format!(
            "energy needs two equal [K,D] latents, got {:?} and {:?}",
            z_pred.shape(),
            z_target.shape()
        )));
    }
    let k = z_pred.shape()[0];
    let mut tape = Tape::new();
    let a = tape.constant(z_pred.clone())?;
    let b = tape.constant(z_target.clone())?;
    let h = energy_var(&mut tape, a, b, k, sigma)?;
    Ok(tape.value(h).data()[0].as_f64())
}

/// Loss for a batch of latent triples, each `[B, K, D]`.
pub fn contrastive_loss<T: Scalar>(
    z_pred: &Tensor<T>,
    z_next: &Tensor<T>,
    z_neg: &Tensor<T>,
    margin: f64,
    sigma: f64,
) -> Result<f64> {
    let s = z_pred.shape();
    if s.len() != 3 || z_next.shape() != s || z_neg.shape() != s {
        return Err(LabError::Dimension("latent triples must share one [B,K,D] shape".into()));
    }
    let (k, d) = (s[1], s[2]);
    let rows = [s[0] * k, d];
    let mut tape = Tape::new();
    let a = tape.constant(z_pred.reshape(&rows)?)?;
    let b = tape.constant(z_next.reshape(&rows)?)?;
    let c = tape.constant(z_neg.reshape(&rows)?)?;
    let l = contrastive_loss_var(&mut tape, a, b, c, k, margin, sigma)?;
    Ok(tape.value(l).data()[0].as_f64())
}
