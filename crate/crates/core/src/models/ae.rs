//! Convolutional autoencoder baseline with an unfactored latent and a
//! residual latent transition used for ranking evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotlab_tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

use super::layers::{Conv, ConvTranspose, Dense, HiddenMlp};
use crate::envs::{EnvKind, ACTION_DIM};
use crate::error::{LabError, Result};

/// Kernel size and stride of the encoder convolution and its mirror.
const PATCH: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub env: EnvKind,
    pub obs_shape: [usize; 3],
    pub num_slots: usize,
    /// Latent size is `num_slots · embedding_dim`, matching the slot model.
    pub embedding_dim: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub transition_hidden: usize,
}

impl AeConfig {
    pub fn for_env(env: EnvKind, obs_shape: [usize; 3], num_slots: usize) -> Self {
        Self {
            env,
            obs_shape,
            num_slots,
            embedding_dim: if env == EnvKind::ThreeBody { 4 } else { 2 },
            conv_channels: 16,
            hidden: 512,
            transition_hidden: 512,
        }
    }

    pub fn latent_len(&self) -> usize {
        self.num_slots * self.embedding_dim
    }

    fn grid(&self) -> [usize; 2] {
        [self.obs_shape[1] / PATCH, self.obs_shape[2] / PATCH]
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.obs_shape;
        if c == 0 || h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
            return Err(LabError::Config(format!(
                "autoencoder needs observation sides that are positive multiples of {PATCH}, got {:?}",
                self.obs_shape
            )));
        }
        if self.latent_len() == 0 || self.conv_channels == 0 || self.hidden < 2 || self.transition_hidden < 2 {
            return Err(LabError::Config("autoencoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layers {
    conv: Conv,
    enc1: Dense,
    enc2: Dense,
    dec1: Dense,
    dec2: Dense,
    deconv: ConvTranspose,
    transition: HiddenMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeModel<T: Scalar> {
    pub config: AeConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Pixel mean squared error on the tape.
pub fn mse_var<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let s = tape.square(d)?;
    Ok(tape.mean(s)?)
}

/// Pixel mean squared error between a reconstruction and its target.
pub fn ae_loss<T: Scalar>(reconstruction: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if reconstruction.shape() != target.shape() {
        return Err(LabError::Dimension(format!(
            "reconstruction {:?} vs target {:?}",
            reconstruction.shape(),
            target.shape()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(reconstruction.clone())?;
    let b = tape.constant(target.clone())?;
    let l = mse_var(&mut tape, a, b)?;
    Ok(tape.value(l).data()[0].as_f64())
}

impl<T: Scalar> AeModel<T> {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let [c, _, _] = config.obs_shape;
        let [gh, gw] = config.grid();
        let ch = config.conv_channels;
        let flat = ch * gh * gw;
        let (l, hid) = (config.latent_len(), config.hidden);
        let conv = Conv::new(&mut s, "encoder.conv", c, ch, PATCH, PATCH, 0, &mut rng);
        let enc1 = Dense::new(&mut s, "encoder.fc1", flat, hid, false, &mut rng);
        let enc2 = Dense::new(&mut s, "encoder.fc2", hid, l, false, &mut rng);
        let dec1 = Dense::new(&mut s, "decoder.fc1", l, hid, false, &mut rng);
        let dec2 = Dense::new(&mut s, "decoder.fc2", hid, flat, false, &mut rng);
        let deconv = ConvTranspose::new(&mut s, "decoder.deconv", ch, c, PATCH, PATCH, &mut rng);
        let transition = HiddenMlp::new(
            &mut s,
            "transition",
            [l + config.num_slots * ACTION_DIM, config.transition_hidden, l],
            true,
            &mut rng,
        );
        Ok(Self {
            config,
            params: s,
            layers: Layers {
                conv,
                enc1,
                enc2,
                dec1,
                dec2,
                deconv,
                transition,
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> AeModel<U> {
        AeModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers,
        }
    }

    /// Latents `[N, K·D]` from observations `[N, C, H, W]`.
    pub fn encode_var(&self, tape: &mut Tape<T>, p: &Bound, obs: Var) -> Result<Var> {
        let s = tape.shape(obs).to_vec();
        if s.len() != 4 || s[1..] != self.config.obs_shape {
            return Err(LabError::Dimension(format!(
                "observations must be [N, {:?}], got {s:?}",
                self.config.obs_shape
            )));
        }
        let h = self.layers.conv.forward(tape, p, obs)?;
        let h = tape.relu(h)?;
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[s[0], flat])?;
        let h = self.layers.enc1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        self.layers.enc2.forward(tape, p, h)
    }

    /// Reconstructions `[N, C, H, W]` in `(0, 1)` from latents `[N, K·D]`.
    pub fn decode_var(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        let h = self.layers.dec1.forward(tape, p, z)?;
        let h = tape.relu(h)?;
        let h = self.layers.dec2.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let [gh, gw] = self.config.grid();
        let h = tape.reshape(h, &[n, self.config.conv_channels, gh, gw])?;
        let h = self.layers.deconv.forward(tape, p, h)?;
        Ok(tape.sigmoid(h)?)
    }

    /// Latent update `[N, K·D]` from latents and flat actions `[N, K·4]`.
    pub fn transition_var(&self, tape: &mut Tape<T>, p: &Bound, z: Var, a: Var) -> Result<Var> {
        let x = tape.concat(&[z, a])?;
        self.layers.transition.forward(tape, p, x)
    }

    fn run<R>(&self, f: impl FnOnce(&mut Tape<T>, &Bound) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape)?;
        f(&mut tape, &p)
    }

    /// `(latent, reconstruction)` for a batch `[N, C, H, W]`.
    pub fn ae_forward(&self, obs: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.run(|tape, p| {
            let x = tape.constant(obs.clone())?;
            let z = self.encode_var(tape, p, x)?;
            let r = self.decode_var(tape, p, z)?;
            Ok((tape.value(z).clone(), tape.value(r).clone()))
        })
    }

    /// Reconstruction of both frames plus prediction of the next frame from
    /// the transitioned latent. `frames` is `[2B, C, H, W]` (observations then
    /// next observations), `actions` is `[B, K·4]`.
    pub fn batch_loss(&self, tape: &mut Tape<T>, p: &Bound, frames: &Tensor<T>, actions: &Tensor<T>) -> Result<Var> {
        let b = actions.shape().first().copied().unwrap_or(0);
        if b == 0 || frames.shape().first() != Some(&(2 * b)) {
            return Err(LabError::Contract(format!(
                "autoencoder batch needs 2×B frames for B actions, got {:?} and {:?}",
                frames.shape(),
                actions.shape()
            )));
        }
        let x = tape.constant(frames.clone())?;
        let a = tape.constant(actions.clone())?;
        let z_all = self.encode_var(tape, p, x)?;
        let recon = self.decode_var(tape, p, z_all)?;
        let rec_loss = mse_var(tape, recon, x)?;
        let z = tape.gather_rows(z_all, &(0..b).collect::<Vec<_>>())?;
        let next = tape.gather_rows(x, &(b..2 * b).collect::<Vec<_>>())?;
        let delta = self.transition_var(tape, p, z, a)?;
        let z_pred = tape.add(z, delta)?;
        let pred = self.decode_var(tape, p, z_pred)?;
        let pred_loss = mse_var(tape, pred, next)?;
        Ok(tape.add(rec_loss, pred_loss)?)
    }

    pub fn loss(&self, frames: &Tensor<T>, actions: &Tensor<T>) -> Result<T> {
        self.run(|tape, p| {
            let l = self.batch_loss(tape, p, frames, actions)?;
            Ok(tape.value(l).item()?)
        })
    }
}
