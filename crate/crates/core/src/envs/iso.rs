//! Isometric cube renderer for the blocks variant of the grid world.
//!
//! Cell (r, c) at height z projects to
//! `x = X0 + (c - r)·A`, `y = Y0 + (c + r)·B - z·H` (in pixels). Each cube
//! shows its top face and the two faces pointing toward larger r and larger
//! c. Cubes are drawn far-to-near (ascending r + c), so nearer cubes
//! overwrite farther ones where they overlap.

use super::catalog::AttributeCatalog;
use super::grid::GridState;
use super::image::Image;
use crate::error::Result;

/// Rendered image side in pixels.
pub const ISO_SIDE: usize = 50;

/// Brightness of the top, +r ("left") and +c ("right") faces.
pub const FACE_SHADES: [f32; 3] = [1.0, 0.75, 0.5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoCamera {
    pub x0: f64,
    pub y0: f64,
    /// Horizontal half-width of one cell.
    pub a: f64,
    /// Vertical half-height of one cell's top face.
    pub b: f64,
    /// Cube height.
    pub h: f64,
}

impl IsoCamera {
    /// Camera that fits a `size`×`size` grid inside the 50×50 frame. For the
    /// default 5×5 grid all projected vertices are integers and no pixel
    /// center lies on a face edge.
    pub fn for_grid(size: usize) -> Self {
        let a = 20.0 / size as f64;
        Self {
            x0: 25.0,
            y0: 15.0,
            a,
            b: a / 2.0,
            h: a * 1.25,
        }
    }

    pub fn project(&self, r: f64, c: f64, z: f64) -> (f64, f64) {
        (
            self.x0 + (c - r) * self.a,
            self.y0 + (c + r) * self.b - z * self.h,
        )
    }

    /// The three visible faces of the cube on cell (r, c), in `FACE_SHADES`
    /// order, as screen-space quads.
    pub fn faces(&self, r: usize, c: usize) -> [[(f64, f64); 4]; 3] {
        let (r, c) = (r as f64, c as f64);
        let p = |r, c, z| self.project(r, c, z);
        [
            [p(r, c, 1.0), p(r, c + 1.0, 1.0), p(r + 1.0, c + 1.0, 1.0), p(r + 1.0, c, 1.0)],
            [p(r + 1.0, c, 1.0), p(r + 1.0, c + 1.0, 1.0), p(r + 1.0, c + 1.0, 0.0), p(r + 1.0, c, 0.0)],
            [p(r, c + 1.0, 1.0), p(r + 1.0, c + 1.0, 1.0), p(r + 1.0, c + 1.0, 0.0), p(r, c + 1.0, 0.0)],
        ]
    }
}

/// Whether `pt` lies inside (or on) the convex quad.
pub fn in_quad(quad: &[(f64, f64); 4], pt: (f64, f64)) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (ax, ay) = quad[i];
        let (bx, by) = quad[(i + 1) % 4];
        let cross = (bx - ax) * (pt.1 - ay) - (by - ay) * (pt.0 - ax);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

/// Renders cubes and returns the image together with a per-pixel owner map
/// (`Some(object)` where an object's face is visible).
pub fn render_blocks_iso_with_owner(
    state: &GridState,
    catalog: &AttributeCatalog,
) -> Result<(Image, Vec<Option<usize>>)> {
    let cam = IsoCamera::for_grid(state.size);
    let mut img = Image::new(ISO_SIDE, ISO_SIDE, 3);
    let mut owner = vec![None; ISO_SIDE * ISO_SIDE];
    let mut order: Vec<usize> = (0..state.num_objects()).collect();
    order.sort_by_key(|&k| {
        let (r, c) = state.positions[k];
        (r + c, r)
    });
    for k in order {
        let (r, c) = state.positions[k];
        let attr = state.attributes[k];
        catalog.shape(attr.shape)?;
        let rgb = catalog.color(attr.color)?.rgb;
        for (face, shade) in cam.faces(r, c).iter().zip(FACE_SHADES) {
            let col = rgb.map(|v| ((v * shade).clamp(0.0, 1.0) * 255.0).round() as u8);
            let (x_lo, x_hi, y_lo, y_hi) = bounds(face);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    if in_quad(face, (x as f64 + 0.5, y as f64 + 0.5)) {
                        img.set_pixel(y, x, &col);
                        owner[y * ISO_SIDE + x] = Some(k);
                    }
                }
            }
        }
    }
    Ok((img, owner))
}

pub fn render_blocks_iso(state: &GridState, catalog: &AttributeCatalog) -> Result<Image> {
    render_blocks_iso_with_owner(state, catalog).map(|(img, _)| img)
}

fn bounds(quad: &[(f64, f64); 4]) -> (usize, usize, usize, usize) {
    let clamp = |v: f64| v.max(0.0).min(ISO_SIDE as f64) as usize;
    let xs = quad.iter().map(|p| p.0);
    let ys = quad.iter().map(|p| p.1);
    (
        clamp(xs.clone().fold(f64::INFINITY, f64::min).floor()),
        clamp(xs.fold(f64::NEG_INFINITY, f64::max).ceil()),
        clamp(ys.clone().fold(f64::INFINITY, f64::min).floor()),
        clamp(ys.fold(f64::NEG_INFINITY, f64::max).ceil()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::catalog::ObjectAttr;
    use std::collections::HashSet;

    #[test]
    fn single_cube_has_three_shades() {
        let cat = AttributeCatalog::default();
        let s = GridState {
            size: 5,
            positions: vec![(2, 2)],
            attributes: vec![ObjectAttr::new(0, 3)],
        };
        let img = render_blocks_iso(&s, &cat).unwrap();
        let colors: HashSet<Vec<u8>> = (0..ISO_SIDE)
            .flat_map(|y| (0..ISO_SIDE).map(move |x| (y, x)))
            .map(|(y, x)| img.pixel(y, x).to_vec())
            .filter(|p| p.iter().any(|&v| v > 0))
            .collect();
        let want: HashSet<Vec<u8>> = FACE_SHADES
            .iter()
            .map(|s| [1.0f32, 1.0, 0.0].map(|v| ((v * s) * 255.0).round() as u8).to_vec())
            .collect();
        assert_eq!(colors, want);
    }

    #[test]
    fn nearer_cube_overwrites_overlap() {
        let cat = AttributeCatalog::default();
        let far = GridState {
            size: 5,
            positions: vec![(1, 1)],
            attributes: vec![ObjectAttr::new(0, 0)],
        };
        let both = GridState {
            size: 5,
            positions: vec![(1, 1), (2, 2)],
            attributes: vec![ObjectAttr::new(0, 0), ObjectAttr::new(1, 1)],
        };
        let (_, far_owner) = render_blocks_iso_with_owner(&far, &cat).unwrap();
        let (img, owner) = render_blocks_iso_with_owner(&both, &cat).unwrap();
        let near_alone = GridState {
            size: 5,
            positions: vec![(2, 2)],
            attributes: vec![ObjectAttr::new(1, 1)],
        };
        let (near_img, near_owner) = render_blocks_iso_with_owner(&near_alone, &cat).unwrap();
        let mut overlap = 0;
        for i in 0..ISO_SIDE * ISO_SIDE {
            if far_owner[i].is_some() && near_owner[i].is_some() {
                overlap += 1;
                assert_eq!(owner[i], Some(1));
                assert_eq!(&img.data()[i * 3..i * 3 + 3], &near_img.data()[i * 3..i * 3 + 3]);
            }
        }
        assert!(overlap > 0, "cubes on a diagonal must overlap");
    }
}
