//! Simulators, renderers and experience-buffer generation.

pub mod bodies;
pub mod buffer;
pub mod catalog;
pub mod dataset;
pub mod grid;
pub mod image;
pub mod iso;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use bodies::BodyConfig;
use grid::GridAction;

pub use buffer::{generate_buffer, owner_masks, render_state, Episode, ExperienceBuffer, Role, SimState};
pub use catalog::{AttributeCatalog, NamedColor, ObjectAttr, Shape};
pub use grid::{grid_reset, grid_step, render_grid, Direction, GridState};
pub use image::Image;

/// Number of action slots per object (one per direction).
pub const ACTION_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Flat 2-d shapes on a grid.
    Shapes,
    /// The same grid dynamics rendered as isometric cubes.
    Blocks,
    /// Three gravitating bodies, no actions.
    ThreeBody,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Shapes, EnvKind::Blocks, EnvKind::ThreeBody];

    pub fn id(self) -> u8 {
        match self {
            EnvKind::Shapes => 0,
            EnvKind::Blocks => 1,
            EnvKind::ThreeBody => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|e| e.id() == id)
            .ok_or_else(|| LabError::Format(format!("unknown environment id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Shapes => "shapes",
            EnvKind::Blocks => "blocks",
            EnvKind::ThreeBody => "three_body",
        }
    }

    pub fn has_actions(self) -> bool {
        self != EnvKind::ThreeBody
    }

    /// Observation channels: RGB, or two stacked RGB frames for three-body.
    pub fn channels(self) -> usize {
        match self {
            EnvKind::ThreeBody => 6,
            _ => 3,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown environment '{s}'")))
    }
}

/// Everything needed to simulate and render one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub num_objects: usize,
    pub grid_size: usize,
    pub bodies: BodyConfig,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            num_objects: if kind == EnvKind::ThreeBody { 3 } else { 5 },
            grid_size: 5,
            bodies: BodyConfig::default(),
        }
    }

    /// Observation extent `[channels, height, width]`.
    pub fn obs_shape(&self) -> [usize; 3] {
        let side = match self.kind {
            EnvKind::Shapes => self.grid_size * catalog::CELL,
            EnvKind::Blocks => iso::ISO_SIDE,
            EnvKind::ThreeBody => self.bodies.image_size,
        };
        [self.kind.channels(), side, side]
    }

    pub fn action_len(&self) -> usize {
        self.num_objects * ACTION_DIM
    }
}

/// Per-object one-hot action blocks, `K × 4` flattened. `None` gives zeros.
pub fn encode_action(action: Option<GridAction>, num_objects: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; num_objects * ACTION_DIM];
    if let Some(a) = action {
        if a.object >= num_objects {
            return Err(LabError::Contract(format!(
                "action targets object {} of {num_objects}",
                a.object
            )));
        }
        out[a.object * ACTION_DIM + a.direction.index()] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_one_hot_layout() {
        let v = encode_action(Some(GridAction::new(2, Direction::Down)), 5).unwrap();
        assert_eq!(v.len(), 20);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(v[9], 1.0);
        assert!(encode_action(None, 3).unwrap().iter().all(|&x| x == 0.0));
        assert!(encode_action(Some(GridAction::new(5, Direction::Up)), 5).is_err());
    }

    #[test]
    fn obs_shapes() {
        assert_eq!(EnvSpec::new(EnvKind::Shapes).obs_shape(), [3, 50, 50]);
        assert_eq!(EnvSpec::new(EnvKind::Blocks).obs_shape(), [3, 50, 50]);
        assert_eq!(EnvSpec::new(EnvKind::ThreeBody).obs_shape(), [6, 50, 50]);
    }
}
