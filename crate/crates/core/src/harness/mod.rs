//! Pipeline driver behind the `slotlab` binary: dataset generation,
//! training, evaluation sweeps and diagnostics, all keyed by one
//! configuration and stamped with its provenance.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{LabConfig, ModelKind};

use crate::diagnostics::{
    buffer_factorization_score, diagonal_mass_ratio, export_feature_maps, matrix_csv, peak_match_rate,
    transition_update_matrix,
};
use crate::envs::dataset::{encode_buffer, read_buffer, DatasetHeader};
use crate::envs::{generate_buffer, AttributeCatalog, EnvKind, ExperienceBuffer, Role};
use crate::error::{LabError, Result};
use crate::eval::{evaluate, MetricsReport, CSV_HEADER};
use crate::models::{
    load_checkpoint, save_checkpoint, train, CheckpointMeta, LoadedCheckpoint, TrainProgress, TrainState, WorldModel,
};
use crate::oodgen::{make_split, SplitKind, SplitSpec};
use crate::provenance::Provenance;

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train.sltd")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("data/eval.sltd")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model/checkpoint.sltc")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("model/epoch_{epoch:04}.sltc"))
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("model/losses.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("eval/metrics.toml")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("eval/metrics.csv")
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("eval/sweep.csv")
    }

    pub fn diagnose_dir(&self, kind: SplitKind, k: usize, hash: &str) -> PathBuf {
        self.root.join(format!("diagnose/{kind}-k{k}-{}", &hash[..8]))
    }
}

/// Writes through a sibling temporary file so readers never see a
/// truncated artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

fn provenance(cfg: &LabConfig, split: Option<&SplitSpec>) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        split: split.cloned(),
    }
}

fn provenance_text(cfg: &LabConfig, split: &SplitSpec) -> String {
    format!(
        "{}\n[effective_config]\n{}",
        provenance(cfg, Some(split)).to_toml(),
        cfg.canonical_toml()
    )
}

pub fn configured_split(cfg: &LabConfig) -> Result<SplitSpec> {
    split_for(cfg, cfg.split.kind, cfg.split.k)
}

fn split_for(cfg: &LabConfig, kind: SplitKind, k: usize) -> Result<SplitSpec> {
    make_split(kind, k, cfg.env_spec().num_objects, &AttributeCatalog::default(), cfg.seed)
}

fn test_buffer(cfg: &LabConfig, split: &SplitSpec, episodes: usize) -> Result<ExperienceBuffer> {
    generate_buffer(
        &cfg.env_spec(),
        split,
        Role::Test,
        episodes,
        cfg.data.steps,
        cfg.eval_data_seed(),
    )
}

pub fn load_dataset(path: &Path) -> Result<(ExperienceBuffer, DatasetHeader)> {
    let file = fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    read_buffer(std::io::BufReader::new(file))
}

/// Generates the train and eval datasets of the configured split and
/// returns their manifests. Nothing is written when the split is
/// infeasible.
pub fn cmd_generate(cfg: &LabConfig) -> Result<String> {
    let split = configured_split(cfg)?;
    let env = cfg.env_spec();
    let layout = RunLayout::new(cfg.run_dir());
    let prov = provenance_text(cfg, &split);
    let train_buf = generate_buffer(
        &env,
        &split,
        Role::Train,
        cfg.data.train_episodes,
        cfg.data.steps,
        cfg.train_data_seed(),
    )?;
    let eval_buf = test_buffer(cfg, &split, cfg.data.eval_episodes)?;
    let mut manifest = String::new();
    for (buf, path) in [(&train_buf, layout.train_data()), (&eval_buf, layout.eval_data())] {
        let bytes = encode_buffer(buf, &prov)?;
        write_atomic(&path, &bytes)?;
        let text = DatasetHeader::of(buf, &prov).manifest();
        write_atomic(&path.with_extension("manifest.toml"), text.as_bytes())?;
        let _ = writeln!(
            manifest,
            "# {}: {} episodes x {} steps ({} transitions)\n{text}",
            path.display(),
            buf.episodes.len(),
            buf.steps(),
            buf.num_transitions()
        );
    }
    Ok(manifest)
}

fn checkpoint_meta(cfg: &LabConfig, split: &SplitSpec, model: &WorldModel<f32>, state: &TrainState) -> CheckpointMeta {
    CheckpointMeta {
        model: model.config(),
        provenance: provenance(cfg, Some(split)),
        progress: Some(TrainProgress {
            epochs_done: state.epochs_done(),
            adam_step: state.adam.steps(),
            train: cfg.train_config(),
        }),
    }
}

fn losses_csv(prov: &Provenance, losses: &[f64]) -> String {
    let mut out = prov.commented("# ");
    out.push_str("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    out
}

/// Summary of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_done: usize,
    pub resumed_from: usize,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains on `data/train.sltd`, saving `model/checkpoint.sltc` every
/// `save_every` epochs and at the end. With `train.resume` set, an existing
/// checkpoint of the same model continues where it stopped. A numeric
/// failure leaves the last saved checkpoint in place.
pub fn cmd_train(cfg: &LabConfig) -> Result<TrainSummary> {
    let layout = RunLayout::new(cfg.run_dir());
    let (buffer, _) = load_dataset(&layout.train_data())?;
    if buffer.env != cfg.env_spec() {
        return Err(LabError::Mismatch(format!(
            "training data holds {} with {} objects, config asks for {} with {}",
            buffer.env.kind,
            buffer.env.num_objects,
            cfg.env.kind,
            cfg.env_spec().num_objects
        )));
    }
    let split = buffer.split.clone();
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let (mut model, resume) = match (cfg.train.resume, layout.checkpoint().exists()) {
        (true, true) => {
            let LoadedCheckpoint { model, meta, adam, losses } = load_checkpoint(&layout.checkpoint())?;
            if meta.model != model_cfg {
                return Err(LabError::Mismatch(
                    "checkpoint architecture differs from the configured model; refusing to resume".into(),
                ));
            }
            let adam = adam.ok_or_else(|| LabError::Mismatch("checkpoint has no optimizer state to resume".into()))?;
            (model, Some(TrainState { adam, epoch_losses: losses }))
        }
        _ => (WorldModel::new(&model_cfg, cfg.init_seed())?, None),
    };
    let resumed_from = resume.as_ref().map_or(0, TrainState::epochs_done);
    let prov = provenance(cfg, Some(&split));
    let every = train_cfg.save_every;
    let state = train(&mut model, &buffer, &train_cfg, resume, |epoch, model, state| {
        write_atomic(&layout.losses(), losses_csv(&prov, &state.epoch_losses).as_bytes())?;
        if (every > 0 && epoch % every == 0) || epoch == train_cfg.epochs {
            let meta = checkpoint_meta(cfg, &split, model, state);
            fs::create_dir_all(layout.root.join("model")).map_err(|e| LabError::io(&layout.root, e))?;
            save_checkpoint(&layout.checkpoint(), model, &meta, Some(&state.adam), &state.epoch_losses)?;
            if every > 0 && epoch % every == 0 {
                fs::copy(layout.checkpoint(), layout.epoch_checkpoint(epoch))
                    .map_err(|e| LabError::io(layout.epoch_checkpoint(epoch), e))?;
            }
        }
        Ok(())
    })?;
    Ok(TrainSummary {
        epochs_done: state.epochs_done(),
        resumed_from,
        losses: state.epoch_losses,
        checkpoint: layout.checkpoint(),
    })
}

fn load_for(cfg: &LabConfig, path: &Path) -> Result<LoadedCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    let want = cfg.env_spec();
    let mc = &ckpt.meta.model;
    if mc.env() != want.kind || mc.num_slots() != want.num_objects || mc.obs_shape() != want.obs_shape() {
        return Err(LabError::Mismatch(format!(
            "checkpoint {} was trained on {} ({} objects, {:?} frames) but the config evaluates {} ({} objects, {:?} frames)",
            path.display(),
            mc.env(),
            mc.num_slots(),
            mc.obs_shape(),
            want.kind,
            want.num_objects,
            want.obs_shape()
        )));
    }
    Ok(ckpt)
}

fn trained_assignment(ckpt: &LoadedCheckpoint) -> Option<&[crate::envs::ObjectAttr]> {
    ckpt.meta.provenance.split.as_ref().map(|s| s.train.as_slice())
}

/// Refuses to score a split whose training assignment the checkpoint never
/// saw.
fn check_family(ckpt: &LoadedCheckpoint, split: &SplitSpec, path: &Path) -> Result<()> {
    match trained_assignment(ckpt) {
        Some(train) if train != split.train.as_slice() => Err(LabError::Mismatch(format!(
            "{} needs a model trained on {:?}, checkpoint {} was trained on {:?}",
            split.kind,
            split.train,
            path.display(),
            train
        ))),
        _ => Ok(()),
    }
}

/// Checkpoint to use for `kind`: `eval.checkpoints[kind]`, else
/// `eval.checkpoint`, else the run's own.
fn checkpoint_path(cfg: &LabConfig, kind: SplitKind) -> PathBuf {
    cfg.eval
        .checkpoints
        .get(kind.name())
        .or(cfg.eval.checkpoint.as_ref())
        .cloned()
        .unwrap_or_else(|| RunLayout::new(cfg.run_dir()).checkpoint())
}

/// Result of `cmd_eval`: a single report, or the combined sweep table.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutput {
    Single(MetricsReport),
    Sweep(Vec<MetricsReport>),
}

/// Kinds swept when `eval.sweep_kinds` is empty: every out-of-distribution
/// kind whose training assignment matches some available checkpoint.
fn sweep_kinds(cfg: &LabConfig) -> Result<Vec<SplitKind>> {
    if !cfg.eval.sweep_kinds.is_empty() {
        return Ok(cfg.eval.sweep_kinds.clone());
    }
    let k = cfg.env_spec().num_objects;
    let mut kinds = Vec::new();
    for kind in SplitKind::OOD {
        let path = checkpoint_path(cfg, kind);
        let ckpt = load_for(cfg, &path)?;
        let family = kind.train_family().assignment(k);
        if trained_assignment(&ckpt).is_none_or(|t| t == family.as_slice()) {
            kinds.push(kind);
        }
    }
    Ok(kinds)
}

/// Single mode scores `data/eval.sltd`. Sweep mode scores kinds × k ∈ 1..=K
/// × horizons on freshly generated test buffers, in that fixed order.
pub fn cmd_eval(cfg: &LabConfig) -> Result<EvalOutput> {
    let layout = RunLayout::new(cfg.run_dir());
    if !cfg.eval.sweep {
        let (buffer, _) = load_dataset(&layout.eval_data())?;
        let path = checkpoint_path(cfg, buffer.split.kind);
        let ckpt = load_for(cfg, &path)?;
        check_family(&ckpt, &buffer.split, &path)?;
        let report = evaluate(
            &ckpt.model,
            &buffer,
            &cfg.eval.horizons,
            provenance(cfg, Some(&buffer.split)),
            ckpt.meta.model.name(),
        )?;
        write_atomic(&layout.metrics(), report.to_toml().as_bytes())?;
        write_atomic(&layout.metrics_csv(), report.to_csv().as_bytes())?;
        return Ok(EvalOutput::Single(report));
    }
    let num_objects = cfg.env_spec().num_objects;
    let mut reports = Vec::new();
    for kind in sweep_kinds(cfg)? {
        let path = checkpoint_path(cfg, kind);
        let ckpt = load_for(cfg, &path)?;
        for k in 1..=num_objects {
            let split = split_for(cfg, kind, k)?;
            check_family(&ckpt, &split, &path)?;
            let buffer = test_buffer(cfg, &split, cfg.data.eval_episodes)?;
            reports.push(evaluate(
                &ckpt.model,
                &buffer,
                &cfg.eval.horizons,
                provenance(cfg, Some(&split)),
                ckpt.meta.model.name(),
            )?);
        }
    }
    let mut table = provenance(cfg, None).commented("# ");
    table.push_str(CSV_HEADER);
    table.push('\n');
    for r in &reports {
        table.push_str(&r.csv_rows());
    }
    write_atomic(&layout.sweep_csv(), table.as_bytes())?;
    Ok(EvalOutput::Sweep(reports))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseSummary {
    pub kind: SplitKind,
    pub k: usize,
    pub model: String,
    /// Absent for models without slot feature maps.
    pub factorization_score: Option<f64>,
    /// Share of slot maps peaking on an object's cell; flat shapes only.
    pub peak_match_rate: Option<f64>,
    /// Absent for environments without actions.
    pub diagonal_mass_ratio: Option<f64>,
    pub update_matrix: Option<Vec<Vec<f64>>>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub dir: PathBuf,
}

/// Feature maps, transition-update matrix and factorization score of the
/// run's checkpoint on the configured split's test distribution, written to
/// `diagnose/<kind>-k<k>-<hash>/`.
pub fn cmd_diagnose(cfg: &LabConfig) -> Result<DiagnoseSummary> {
    let layout = RunLayout::new(cfg.run_dir());
    let split = configured_split(cfg)?;
    let path = checkpoint_path(cfg, split.kind);
    let ckpt = load_for(cfg, &path)?;
    check_family(&ckpt, &split, &path)?;
    let prov = provenance(cfg, Some(&split));
    let dir = layout.diagnose_dir(split.kind, split.num_changed, &prov.config_hash);
    let steps = cfg.data.steps;
    let episodes = cfg.diagnose.score_samples.div_ceil(steps + 1).max(1);
    let buffer = test_buffer(cfg, &split, episodes)?;
    write_atomic(&dir.join("provenance.toml"), provenance_text(cfg, &split).as_bytes())?;

    let mut factorization = None;
    let mut peak_match = None;
    if let WorldModel::Cswm(model) = &ckpt.model {
        let n = cfg.diagnose.observations.min(episodes);
        let mut obs = Vec::new();
        for e in 0..n {
            buffer.push_observation(e, 0, &mut obs);
        }
        let maps_dir = dir.join("maps");
        if maps_dir.exists() {
            fs::remove_dir_all(&maps_dir).map_err(|e| LabError::io(&maps_dir, e))?;
        }
        export_feature_maps(model, &obs, n, &maps_dir, &prov)?;
        let items: Vec<(usize, usize)> = (0..episodes)
            .flat_map(|e| (0..=steps).map(move |t| (e, t)))
            .take(cfg.diagnose.score_samples)
            .collect();
        factorization = Some(buffer_factorization_score(model, &buffer, &items)?);
        if cfg.env.kind == EnvKind::Shapes {
            peak_match = Some(peak_match_rate(model, &buffer, &items)?);
        }
    }
    let matrix = if cfg.env.kind.has_actions() {
        let m = transition_update_matrix(&ckpt.model, &buffer)?;
        write_atomic(&dir.join("update_matrix.csv"), matrix_csv(&m, &prov).as_bytes())?;
        Some(m)
    } else {
        None
    };
    let summary = DiagnoseSummary {
        kind: split.kind,
        k: split.num_changed,
        model: ckpt.meta.model.name().to_string(),
        factorization_score: factorization,
        peak_match_rate: peak_match,
        diagonal_mass_ratio: matrix.as_deref().map(diagonal_mass_ratio),
        update_matrix: matrix,
        provenance: prov,
        dir: dir.clone(),
    };
    let text = toml::to_string(&summary).map_err(|e| LabError::Format(format!("diagnose summary: {e}")))?;
    write_atomic(&dir.join("summary.toml"), text.as_bytes())?;
    Ok(summary)
}
