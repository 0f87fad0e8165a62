//! Episodes of rendered transitions and their parallel generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bodies::{body_owner_masks, render_bodies, BodyState};
use super::catalog::{AttributeCatalog, NamedColor, ObjectAttr};
use super::grid::{grid_owner_masks, grid_reset, grid_step, render_grid, Direction, GridAction, GridState};
use super::image::Image;
use super::iso::render_blocks_iso_with_owner;
use super::{encode_action, EnvKind, EnvSpec};
use crate::error::{LabError, Result};
use crate::oodgen::SplitSpec;

/// Which side of a split a buffer samples attributes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn id(self) -> u8 {
        match self {
            Role::Train => 0,
            Role::Test => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Role::Train),
            1 => Ok(Role::Test),
            _ => Err(LabError::Format(format!("unknown role id {id}"))),
        }
    }
}

/// Exact simulator state behind one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimState {
    Grid(GridState),
    /// Bodies at the previous and current frame (the observation shows both).
    Bodies {
        previous: BodyState,
        current: BodyState,
    },
}

impl SimState {
    pub fn num_objects(&self) -> usize {
        match self {
            SimState::Grid(g) => g.num_objects(),
            SimState::Bodies { current, .. } => current.bodies.len(),
        }
    }
}

/// `T` transitions stored as `T + 1` frames: step `t` goes from
/// `observations[t]` via `actions[t]` to `observations[t + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<Image>,
    pub actions: Vec<Option<GridAction>>,
    pub states: Vec<SimState>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceBuffer {
    pub env: EnvSpec,
    pub split: SplitSpec,
    pub role: Role,
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

impl ExperienceBuffer {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Steps per episode (all episodes share one length).
    pub fn steps(&self) -> usize {
        self.episodes.first().map_or(0, Episode::len)
    }

    pub fn assignment(&self) -> &[ObjectAttr] {
        match self.role {
            Role::Train => &self.split.train,
            Role::Test => &self.split.test,
        }
    }

    /// Observation as a `[C,H,W]` float array in `[0,1]`, appended to `out`.
    pub fn push_observation(&self, episode: usize, t: usize, out: &mut Vec<f32>) {
        let img = &self.episodes[episode].observations[t];
        let start = out.len();
        out.resize(start + img.data().len(), 0.0);
        img.write_chw(&mut out[start..]);
    }

    /// `K × 4` action encoding of step `t` of an episode.
    pub fn action_vector(&self, episode: usize, t: usize) -> Vec<f32> {
        encode_action(self.episodes[episode].actions[t], self.env.num_objects)
            .expect("stored actions target valid objects")
    }
}

/// Body colors for a three-body assignment: each body uses its color id.
pub fn body_colors(catalog: &AttributeCatalog, assignment: &[ObjectAttr]) -> Result<Vec<NamedColor>> {
    assignment
        .iter()
        .map(|a| catalog.color(a.color).cloned())
        .collect()
}

/// Renders the observation for a state. Grid states carry their own
/// attributes; bodies take their colors from `assignment`.
pub fn render_state(
    env: &EnvSpec,
    catalog: &AttributeCatalog,
    assignment: &[ObjectAttr],
    state: &SimState,
) -> Result<Image> {
    match (env.kind, state) {
        (EnvKind::Shapes, SimState::Grid(g)) => render_grid(g, catalog),
        (EnvKind::Blocks, SimState::Grid(g)) => Ok(render_blocks_iso_with_owner(g, catalog)?.0),
        (EnvKind::ThreeBody, SimState::Bodies { previous, current }) => {
            render_bodies(current, previous, &body_colors(catalog, assignment)?, &env.bodies)
        }
        _ => Err(LabError::Mismatch(format!("state does not belong to {}", env.kind))),
    }
}

/// Per-object visible pixel masks `[K][H*W]` of the current frame.
pub fn owner_masks(env: &EnvSpec, catalog: &AttributeCatalog, state: &SimState) -> Result<Vec<Vec<f32>>> {
    match (env.kind, state) {
        (EnvKind::Shapes, SimState::Grid(g)) => grid_owner_masks(g, catalog),
        (EnvKind::Blocks, SimState::Grid(g)) => {
            let (_, owner) = render_blocks_iso_with_owner(g, catalog)?;
            let mut masks = vec![vec![0.0; owner.len()]; g.num_objects()];
            for (i, o) in owner.iter().enumerate() {
                if let Some(k) = o {
                    masks[*k][i] = 1.0;
                }
            }
            Ok(masks)
        }
        (EnvKind::ThreeBody, SimState::Bodies { current, .. }) => {
            Ok(body_owner_masks(current, &env.bodies))
        }
        _ => Err(LabError::Mismatch(format!("state does not belong to {}", env.kind))),
    }
}

fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn grid_episode(
    env: &EnvSpec,
    catalog: &AttributeCatalog,
    assignment: &[ObjectAttr],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut state = grid_reset(rng, env.grid_size, assignment)?;
    let wrap = |s: &GridState| SimState::Grid(s.clone());
    let mut observations = vec![render_state(env, catalog, assignment, &wrap(&state))?];
    let mut states = vec![wrap(&state)];
    let mut actions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = GridAction::new(
            rng.gen_range(0..assignment.len()),
            Direction::ALL[rng.gen_range(0..4)],
        );
        state = grid_step(&state, action)?;
        observations.push(render_state(env, catalog, assignment, &wrap(&state))?);
        states.push(wrap(&state));
        actions.push(Some(action));
    }
    Ok(Episode {
        observations,
        actions,
        states,
    })
}

fn body_episode(
    env: &EnvSpec,
    colors: &[NamedColor],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let traj = env.bodies.sample_trajectory(rng, env.num_objects, steps)?;
    let mut observations = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    for pair in traj.windows(2) {
        observations.push(render_bodies(&pair[1], &pair[0], colors, &env.bodies)?);
        states.push(SimState::Bodies {
            previous: pair[0].clone(),
            current: pair[1].clone(),
        });
    }
    Ok(Episode {
        observations,
        actions: vec![None; steps],
        states,
    })
}

/// Generates `episodes` episodes of `steps` transitions using the split's
/// assignment for `role`. Episode `i` draws from its own random stream
/// derived from `(seed, i)`, so the result does not depend on scheduling.
pub fn generate_buffer(
    env: &EnvSpec,
    split: &SplitSpec,
    role: Role,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<ExperienceBuffer> {
    if split.num_objects != env.num_objects {
        return Err(LabError::Mismatch(format!(
            "split has {} objects, environment has {}",
            split.num_objects, env.num_objects
        )));
    }
    let catalog = &split.catalog;
    let assignment = match role {
        Role::Train => &split.train,
        Role::Test => &split.test,
    };
    let colors = if env.kind == EnvKind::ThreeBody {
        body_colors(catalog, assignment)?
    } else {
        Vec::new()
    };
    let eps = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, i);
            match env.kind {
                EnvKind::ThreeBody => body_episode(env, &colors, steps, &mut rng),
                _ => grid_episode(env, catalog, assignment, steps, &mut rng),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperienceBuffer {
        env: env.clone(),
        split: split.clone(),
        role,
        seed,
        episodes: eps,
    })
}
