//! Latent-space ranking evaluation: multi-step latent rollouts scored
//! against the encoded true future states with Hits@1 and mean reciprocal
//! rank.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, ExperienceBuffer};
use crate::error::{LabError, Result};
use crate::provenance::Provenance;

/// Number of samples pushed through a model at once during evaluation.
const CHUNK: usize = 250;

/// Anything that maps observations to a flat `K·D` latent and steps it
/// forward under an action.
pub trait LatentModel {
    fn num_slots(&self) -> usize;
    fn slot_dim(&self) -> usize;

    fn latent_len(&self) -> usize {
        self.num_slots() * self.slot_dim()
    }

    /// Latents for `n` observations given as consecutive `[C,H,W]` floats.
    fn encode_batch(&self, obs: &[f32], n: usize) -> Result<Vec<f32>>;

    /// `z + Δ(z, a)` for `n` latents and `K × 4` action blocks.
    fn step_batch(&self, z: &[f32], actions: &[f32], n: usize) -> Result<Vec<f32>>;
}

/// `z_T` from `obs_0` by `T` residual transitions, without re-encoding any
/// intermediate frame.
pub fn rollout_latent(model: &dyn LatentModel, obs0: &[f32], actions: &[Vec<f32>]) -> Result<Vec<f32>> {
    if actions.is_empty() {
        return Err(LabError::Contract("rollout needs at least one action".into()));
    }
    let mut z = model.encode_batch(obs0, 1)?;
    for a in actions {
        z = model.step_batch(&z, a, 1)?;
    }
    Ok(z)
}

/// Encoded true target states, one flat row per evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBuffer {
    dim: usize,
    data: Vec<f32>,
}

impl ReferenceBuffer {
    pub fn new(data: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(LabError::Dimension(format!(
                "{} values do not form rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// `1 + #rows strictly closer to `predicted` than the true row` (squared
/// Euclidean). Rows tied with the truth do not count against it.
pub fn rank_of_truth(predicted: &[f32], truth_index: usize, buffer: &ReferenceBuffer) -> Result<usize> {
    if buffer.rows() == 0 {
        return Err(LabError::Contract("rank against an empty reference buffer".into()));
    }
    if truth_index >= buffer.rows() {
        return Err(LabError::Contract(format!(
            "truth index {truth_index} outside {} reference rows",
            buffer.rows()
        )));
    }
    if predicted.len() != buffer.dim() {
        return Err(LabError::Dimension(format!(
            "prediction has {} values, reference rows have {}",
            predicted.len(),
            buffer.dim()
        )));
    }
    let truth = sq_dist(predicted, buffer.row(truth_index));
    Ok(1 + (0..buffer.rows())
        .filter(|&i| sq_dist(predicted, buffer.row(i)) < truth)
        .count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub samples: usize,
    pub hits_at_1: f64,
    pub mrr: f64,
}

impl HorizonMetrics {
    pub fn from_ranks(horizon: usize, ranks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        Self {
            horizon,
            samples: ranks.len(),
            hits_at_1: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub env: EnvKind,
    pub model: String,
    pub provenance: Provenance,
    pub horizons: Vec<HorizonMetrics>,
}

pub const CSV_HEADER: &str = "env,model,kind,k,horizon,samples,hits_at_1,mrr";

impl MetricsReport {
    pub fn get(&self, horizon: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|h| h.horizon == horizon)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// Data rows (no header) for the comma-separated table.
    pub fn csv_rows(&self) -> String {
        let (kind, k) = self
            .provenance
            .split
            .as_ref()
            .map_or(("none".to_string(), 0), |s| (s.kind.to_string(), s.num_changed));
        self.horizons
            .iter()
            .map(|h| {
                format!(
                    "{},{},{kind},{k},{},{},{},{}\n",
                    self.env, self.model, h.horizon, h.samples, h.hits_at_1, h.mrr
                )
            })
            .collect()
    }

    /// Table with the provenance block as leading `#` comment lines.
    pub fn to_csv(&self) -> String {
        format!("{}{CSV_HEADER}\n{}", self.provenance.commented("# "), self.csv_rows())
    }
}

fn encode_all(model: &dyn LatentModel, buffer: &ExperienceBuffer, t: usize) -> Result<Vec<f32>> {
    let n = buffer.episodes.len();
    let mut out = Vec::with_capacity(n * model.latent_len());
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let mut obs = Vec::new();
        for e in start..end {
            buffer.push_observation(e, t, &mut obs);
        }
        out.extend(model.encode_batch(&obs, end - start)?);
    }
    Ok(out)
}

/// Scores every episode's rollout from step 0 for each horizon `T` against
/// the reference buffer of all episodes' encoded step-`T` observations.
pub fn evaluate(
    model: &dyn LatentModel,
    buffer: &ExperienceBuffer,
    horizons: &[usize],
    provenance: Provenance,
    model_name: &str,
) -> Result<MetricsReport> {
    let steps = buffer.steps();
    if buffer.episodes.is_empty() {
        return Err(LabError::Contract("evaluation buffer is empty".into()));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > steps) {
        return Err(LabError::Contract(format!(
            "horizon {h} not in 1..={steps} (episode length)"
        )));
    }
    if buffer.episodes.iter().any(|e| e.len() != steps) {
        return Err(LabError::Contract("episodes must share one length".into()));
    }
    let n = buffer.episodes.len();
    let dim = model.latent_len();
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    let mut z = encode_all(model, buffer, 0)?;
    let mut predictions: Vec<(usize, Vec<f32>)> = Vec::new();
    for t in 0..max_h {
        let mut next = Vec::with_capacity(z.len());
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let actions: Vec<f32> = (start..end).flat_map(|e| buffer.action_vector(e, t)).collect();
            next.extend(model.step_batch(&z[start * dim..end * dim], &actions, end - start)?);
        }
        z = next;
        if horizons.contains(&(t + 1)) {
            predictions.push((t + 1, z.clone()));
        }
    }
    let mut records = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let pred = &predictions.iter().find(|(t, _)| *t == h).expect("rolled out").1;
        let reference = ReferenceBuffer::new(encode_all(model, buffer, h)?, dim)?;
        let ranks = (0..n)
            .into_par_iter()
            .map(|i| rank_of_truth(&pred[i * dim..(i + 1) * dim], i, &reference))
            .collect::<Result<Vec<_>>>()?;
        records.push(HorizonMetrics::from_ranks(h, &ranks));
    }
    Ok(MetricsReport {
        env: buffer.env.kind,
        model: model_name.to_string(),
        provenance,
        horizons: records,
    })
}
