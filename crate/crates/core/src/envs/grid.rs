//! Block-pushing grid world: K objects on a G×G grid, one object moved one
//! cell per step, blocked by walls and other objects.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{AttributeCatalog, ObjectAttr, CELL};
use super::image::Image;
use crate::error::{LabError, Result};

/// Movement direction. Row 0 is the top of the image; `Up` decrements the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridAction {
    pub object: usize,
    pub direction: Direction,
}

impl GridAction {
    pub fn new(object: usize, direction: Direction) -> Self {
        Self { object, direction }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub size: usize,
    /// (row, col) per object.
    pub positions: Vec<(usize, usize)>,
    pub attributes: Vec<ObjectAttr>,
}

impl GridState {
    pub fn num_objects(&self) -> usize {
        self.positions.len()
    }

    pub fn occupant(&self, cell: (usize, usize)) -> Option<usize> {
        self.positions.iter().position(|&p| p == cell)
    }

    pub fn is_valid(&self) -> bool {
        self.positions.len() == self.attributes.len()
            && self.positions.iter().all(|&(r, c)| r < self.size && c < self.size)
            && self
                .positions
                .iter()
                .enumerate()
                .all(|(i, p)| !self.positions[..i].contains(p))
    }
}

/// Places one object per assignment entry on distinct cells drawn uniformly
/// without replacement.
pub fn grid_reset<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    assignment: &[ObjectAttr],
) -> Result<GridState> {
    let k = assignment.len();
    if k > size * size {
        return Err(LabError::Capacity(format!(
            "{k} objects do not fit on a {size}x{size} grid"
        )));
    }
    for (i, a) in assignment.iter().enumerate() {
        if assignment[..i].contains(a) {
            return Err(LabError::Contract(format!(
                "attribute pair {a:?} assigned twice"
            )));
        }
    }
    let cells = sample(rng, size * size, k);
    Ok(GridState {
        size,
        positions: cells.iter().map(|c| (c / size, c % size)).collect(),
        attributes: assignment.to_vec(),
    })
}

/// Moves the target object one cell. Moves off the grid or onto another
/// object leave the state unchanged.
pub fn grid_step(state: &GridState, action: GridAction) -> Result<GridState> {
    let Some(&(r, c)) = state.positions.get(action.object) else {
        return Err(LabError::Contract(format!(
            "object {} out of range for {} objects",
            action.object,
            state.num_objects()
        )));
    };
    let (dr, dc) = action.direction.delta();
    let (nr, nc) = (r as isize + dr, c as isize + dc);
    let mut next = state.clone();
    if nr < 0 || nc < 0 || nr >= state.size as isize || nc >= state.size as isize {
        return Ok(next);
    }
    let dest = (nr as usize, nc as usize);
    if state.occupant(dest).is_none() {
        next.positions[action.object] = dest;
    }
    Ok(next)
}

/// Flat 2-d raster: each object's shape stencil in its color inside its cell,
/// on black.
pub fn render_grid(state: &GridState, catalog: &AttributeCatalog) -> Result<Image> {
    let side = state.size * CELL;
    let mut img = Image::new(side, side, 3);
    for (&(r, c), attr) in state.positions.iter().zip(&state.attributes) {
        let shape = catalog.shape(attr.shape)?;
        let rgb = catalog.color(attr.color)?.to_u8();
        for y in 0..CELL {
            for x in 0..CELL {
                if shape.covers(y, x) {
                    img.set_pixel(r * CELL + y, c * CELL + x, &rgb);
                }
            }
        }
    }
    Ok(img)
}

/// Per-object pixel masks of a flat render, `[K][side*side]`.
pub fn grid_owner_masks(state: &GridState, catalog: &AttributeCatalog) -> Result<Vec<Vec<f32>>> {
    let side = state.size * CELL;
    let mut masks = vec![vec![0.0; side * side]; state.num_objects()];
    for (k, (&(r, c), attr)) in state.positions.iter().zip(&state.attributes).enumerate() {
        let shape = catalog.shape(attr.shape)?;
        for y in 0..CELL {
            for x in 0..CELL {
                if shape.covers(y, x) {
                    masks[k][(r * CELL + y) * side + c * CELL + x] = 1.0;
                }
            }
        }
    }
    Ok(masks)
}
