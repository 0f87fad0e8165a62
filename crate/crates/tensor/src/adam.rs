use crate::checkpoint::Entry;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        Self {
            config,
            step: 0,
            m: params.iter().map(|(_, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Every parameter must carry a gradient;
    /// gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::Contract(
                "optimizer state does not match parameter store".into(),
            ));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(TensorError::Contract(format!(
                "parameter {name} has no gradient"
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for (((_, p), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take().expect("checked above");
            for (((w, g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * *g;
                *vi = b2 * *vi + (T::one() - b2) * *g * *g;
                *w -= step_size * *mi / ((*vi).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Moments as checkpoint entries named `adam.m.<param>` / `adam.v.<param>`.
    pub fn to_entries(&self, params: &ParamStore<T>) -> Vec<Entry> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (((name, p), m), v) in params.iter().zip(&self.m).zip(&self.v) {
            let shape = p.shape();
            out.push(Entry::from_slice(&format!("adam.m.{name}"), shape, m));
            out.push(Entry::from_slice(&format!("adam.v.{name}"), shape, v));
        }
        out
    }

    pub fn from_entries(
        config: AdamConfig,
        step: u64,
        params: &ParamStore<T>,
        entries: &[Entry],
    ) -> Result<Self> {
        let mut state = Self::new(config, params);
        state.step = step;
        for ((name, _), (m, v)) in params.iter().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
            for (prefix, dst) in [("adam.m.", m), ("adam.v.", v)] {
                let key = format!("{prefix}{name}");
                let e = entries
                    .iter()
                    .find(|e| e.name == key)
                    .ok_or_else(|| TensorError::Checkpoint(format!("missing {key}")))?;
                let vals = e.to_vec::<T>();
                if vals.len() != dst.len() {
                    return Err(TensorError::Checkpoint(format!("{key}: wrong length")));
                }
                *dst = vals;
            }
        }
        Ok(state)
    }
}
