//! Interpretability measurements: slot feature-map export, per-object
//! transition-update matrices and a slot/object factorization score.

use std::fs;
use std::path::{Path, PathBuf};

use itertools::Itertools;
use slotlab_tensor::Tensor;

use crate::envs::{owner_masks, ExperienceBuffer, SimState, ACTION_DIM};
use crate::eval::LatentModel;
use crate::error::{LabError, Result};
use crate::models::CswmModel;
use crate::provenance::Provenance;

/// Norms below this count as a constant map when correlating.
const FLAT: f64 = 1e-12;

/// Slot maps `[n][K][h·w]` for `n` observations of `[C,H,W]` floats.
pub fn slot_maps(model: &CswmModel<f32>, obs: &[f32], n: usize) -> Result<Vec<Vec<Vec<f32>>>> {
    let [c, h, w] = model.config.obs_shape;
    let x = Tensor::new(&[n, c, h, w], obs.to_vec())
        .map_err(|_| LabError::Dimension(format!("{} values are not {n} observations", obs.len())))?;
    let maps = model.extract_masks(&x)?;
    let k = model.config.num_slots;
    let [mh, mw] = model.config.map_shape();
    Ok(maps
        .data()
        .chunks(k * mh * mw)
        .map(|m| m.chunks(mh * mw).map(<[f32]>::to_vec).collect())
        .collect())
}

/// Binary (P5) portable graymap with the provenance block as comments.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8], provenance: &Provenance) -> Vec<u8> {
    let mut out = format!("P5\n{}{width} {height}\n255\n", provenance.commented("# ")).into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `obs{i}_slot{k}.pgm` for every observation and slot plus one
/// `obs{i}_montage.pgm` per observation (slots side by side). Returns the
/// written paths in order.
pub fn export_feature_maps(
    model: &CswmModel<f32>,
    obs: &[f32],
    n: usize,
    dir: &Path,
    provenance: &Provenance,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let maps = slot_maps(model, obs, n)?;
    let [mh, mw] = model.config.map_shape();
    let k = model.config.num_slots;
    let mut written = Vec::with_capacity(n * (k + 1));
    let mut put = |name: String, w: usize, h: usize, px: &[u8]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, pgm_bytes(w, h, px, provenance)).map_err(|e| LabError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for (i, slots) in maps.iter().enumerate() {
        for (s, m) in slots.iter().enumerate() {
            let px: Vec<u8> = m.iter().map(|&v| gray(v)).collect();
            put(format!("obs{i:04}_slot{s}.pgm"), mw, mh, &px)?;
        }
        let mut montage = Vec::with_capacity(k * mh * mw);
        for y in 0..mh {
            for m in slots {
                montage.extend(m[y * mw..(y + 1) * mw].iter().map(|&v| gray(v)));
            }
        }
        put(format!("obs{i:04}_montage.pgm"), k * mw, mh, &montage)?;
    }
    Ok(written)
}

/// Average-pools a `[H·W]` mask down to `[h·w]`; `H, W` must be multiples.
pub fn downscale_mask(mask: &[f32], [hh, ww]: [usize; 2], [h, w]: [usize; 2]) -> Result<Vec<f32>> {
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 || mask.len() != hh * ww {
        return Err(LabError::Dimension(format!(
            "cannot pool a {hh}x{ww} mask ({} values) to {h}x{w}",
            mask.len()
        )));
    }
    let (fy, fx) = (hh / h, ww / w);
    let mut out = vec![0.0; h * w];
    for y in 0..hh {
        for x in 0..ww {
            out[(y / fy) * w + x / fx] += mask[y * ww + x];
        }
    }
    let area = (fy * fx) as f32;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Magnitude of the cosine similarity of mean-centered vectors, in `[0, 1]`;
/// zero when either vector is constant. A slot may mark its object with low
/// activation on a bright background, so sign is ignored.
pub fn centered_correlation(a: &[f32], b: &[f32]) -> f64 {
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na.sqrt() < FLAT || nb.sqrt() < FLAT {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).abs().min(1.0)
}

/// Permutation `σ` maximizing `Σ_j score[j][σ(j)]` by exhaustive search,
/// with that maximum. Ties go to the lexicographically first permutation.
pub fn best_assignment(score: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let k = score.len();
    let mut best = ((0..k).collect::<Vec<_>>(), f64::NEG_INFINITY);
    for perm in (0..k).permutations(k) {
        let total: f64 = perm.iter().enumerate().map(|(j, &s)| score[j][s]).sum();
        if total > best.1 {
            best = (perm, total);
        }
    }
    if k == 0 {
        best.1 = 0.0;
    }
    best
}

/// Mean matched slot/object correlation. `maps[n][slot]` and
/// `masks[n][object]` are flattened at one resolution; the correlation matrix
/// is averaged over observations before the one-to-one assignment.
pub fn factorization_score(maps: &[Vec<Vec<f32>>], masks: &[Vec<Vec<f32>>]) -> Result<f64> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(LabError::Dimension(format!(
            "{} map sets vs {} mask sets",
            maps.len(),
            masks.len()
        )));
    }
    let k = maps[0].len();
    let mut corr = vec![vec![0.0; k]; k];
    for (slots, objects) in maps.iter().zip(masks) {
        if slots.len() != k || objects.len() != k {
            return Err(LabError::Dimension(format!(
                "{} slots vs {} objects",
                slots.len(),
                objects.len()
            )));
        }
        for (s, m) in slots.iter().enumerate() {
            for (o, g) in objects.iter().enumerate() {
                if m.len() != g.len() {
                    return Err(LabError::Dimension(format!(
                        "slot map has {} values, object mask has {}",
                        m.len(),
                        g.len()
                    )));
                }
                corr[s][o] += centered_correlation(m, g) / maps.len() as f64;
            }
        }
    }
    let (_, total) = best_assignment(&corr);
    Ok(if k == 0 { 0.0 } else { total / k as f64 })
}

/// Factorization score of a slot model over observations `(episode, step)`
/// of a buffer, with object masks from the stored simulator states.
pub fn buffer_factorization_score(
    model: &CswmModel<f32>,
    buffer: &ExperienceBuffer,
    items: &[(usize, usize)],
) -> Result<f64> {
    let [_, hh, ww] = buffer.env.obs_shape();
    let map_shape = model.config.map_shape();
    let mut obs = Vec::new();
    let mut masks = Vec::with_capacity(items.len());
    for &(e, t) in items {
        buffer.push_observation(e, t, &mut obs);
        let full = owner_masks(&buffer.env, &buffer.split.catalog, &buffer.episodes[e].states[t])?;
        masks.push(
            full.iter()
                .map(|m| downscale_mask(m, [hh, ww], map_shape))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut maps = Vec::with_capacity(items.len());
    for (chunk, n) in obs
        .chunks(250 * buffer.env.obs_shape().iter().product::<usize>())
        .map(|c| (c, c.len() / buffer.env.obs_shape().iter().product::<usize>()))
    {
        maps.extend(slot_maps(model, chunk, n)?);
    }
    factorization_score(&maps, &masks)
}

/// Cell whose activation deviates most from the map mean (first on ties).
pub fn peak_cell(map: &[f32]) -> usize {
    let mean = map.iter().map(|&v| v as f64).sum::<f64>() / map.len().max(1) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in map.iter().enumerate() {
        let d = (v as f64 - mean).abs();
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Fraction of (observation, slot) pairs whose [`peak_cell`] is a cell
/// occupied by an object. Maps must share the grid's layout (flat shapes).
pub fn peak_match_rate(model: &CswmModel<f32>, buffer: &ExperienceBuffer, items: &[(usize, usize)]) -> Result<f64> {
    let [_, mw] = model.config.map_shape();
    let mut obs = Vec::new();
    let mut cells = Vec::with_capacity(items.len());
    for &(e, t) in items {
        let SimState::Grid(g) = &buffer.episodes[e].states[t] else {
            return Err(LabError::UnsupportedEnv(format!("{:?} has no object cells", buffer.env.kind)));
        };
        buffer.push_observation(e, t, &mut obs);
        cells.push(g.positions.iter().map(|&(r, c)| r * mw + c).collect::<Vec<_>>());
    }
    if items.is_empty() {
        return Ok(0.0);
    }
    let maps = slot_maps(model, &obs, items.len())?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (slots, occupied) in maps.iter().zip(&cells) {
        for m in slots {
            total += 1;
            hits += usize::from(occupied.contains(&peak_cell(m)));
        }
    }
    Ok(hits as f64 / total as f64)
}

/// `M[j][k]` = mean over transitions acting on object `j` of `‖Δz_k‖`.
pub fn transition_update_matrix(model: &dyn LatentModel, buffer: &ExperienceBuffer) -> Result<Vec<Vec<f64>>> {
    if !buffer.env.kind.has_actions() {
        return Err(LabError::UnsupportedEnv(format!(
            "{} has no actions to attribute updates to",
            buffer.env.kind
        )));
    }
    let (k, d) = (model.num_slots(), model.slot_dim());
    let mut sums = vec![vec![0.0; k]; k];
    let mut counts = vec![0usize; k];
    let items: Vec<(usize, usize)> = buffer
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
        .collect();
    for chunk in items.chunks(250) {
        let mut obs = Vec::new();
        let mut actions = Vec::with_capacity(chunk.len() * k * ACTION_DIM);
        for &(e, t) in chunk {
            buffer.push_observation(e, t, &mut obs);
            actions.extend(buffer.action_vector(e, t));
        }
        let z = model.encode_batch(&obs, chunk.len())?;
        let next = model.step_batch(&z, &actions, chunk.len())?;
        for (i, &(e, t)) in chunk.iter().enumerate() {
            let Some(a) = buffer.episodes[e].actions[t] else {
                continue;
            };
            counts[a.object] += 1;
            for s in 0..k {
                let o = (i * k + s) * d;
                let norm: f64 = (o..o + d)
                    .map(|j| (next[j] as f64 - z[j] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                sums[a.object][s] += norm;
            }
        }
    }
    for (row, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok(sums)
}

/// `mean_j M[j][σ(j)] / Σ_k M[j][k]` under the column assignment `σ` that
/// maximizes it. Rows with zero mass contribute zero.
pub fn diagonal_mass_ratio(m: &[Vec<f64>]) -> f64 {
    let ratios: Vec<Vec<f64>> = m
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(|&v| if total > 0.0 { v / total } else { 0.0 }).collect()
        })
        .collect();
    let (_, total) = best_assignment(&ratios);
    if m.is_empty() {
        0.0
    } else {
        total / m.len() as f64
    }
}

/// Comma-separated matrix with the provenance block as `#` comments.
pub fn matrix_csv(m: &[Vec<f64>], provenance: &Provenance) -> String {
    let k = m.first().map_or(0, Vec::len);
    let mut out = provenance.commented("# ");
    out.push_str("acted_object");
    for s in 0..k {
        out.push_str(&format!(",slot{s}"));
    }
    out.push('\n');
    for (j, row) in m.iter().enumerate() {
        out.push_str(&j.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
