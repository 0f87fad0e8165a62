//! Planar gravitational N-body system integrated with kick-drift-kick
//! leapfrog, rendered as colored discs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::NamedColor;
use super::image::Image;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub bodies: Vec<Body>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gravity {
    pub g: f64,
    pub softening: f64,
}

impl Default for Gravity {
    fn default() -> Self {
        Self {
            g: 1.0,
            softening: 0.1,
        }
    }
}

/// Simulation and camera constants for the 3-body environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyConfig {
    pub gravity: Gravity,
    pub dt: f64,
    /// Leapfrog steps between consecutive observation frames.
    pub substeps: usize,
    /// Visible world region is `[-half_extent, half_extent]²`.
    pub half_extent: f64,
    pub disc_radius: f64,
    pub image_size: usize,
    pub mass_range: (f64, f64),
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            gravity: Gravity::default(),
            dt: 0.01,
            substeps: 10,
            half_extent: 2.0,
            disc_radius: 3.0,
            image_size: 50,
            mass_range: (0.5, 1.5),
        }
    }
}

fn accelerations(bodies: &[Body], gravity: &Gravity) -> Vec<[f64; 2]> {
    let eps2 = gravity.softening * gravity.softening;
    let mut acc = vec![[0.0; 2]; bodies.len()];
    for i in 0..bodies.len() {
        for j in (i + 1)..bodies.len() {
            let dx = bodies[j].pos[0] - bodies[i].pos[0];
            let dy = bodies[j].pos[1] - bodies[i].pos[1];
            let r2 = dx * dx + dy * dy + eps2;
            let inv = gravity.g / (r2 * r2.sqrt());
            // Equal and opposite: the pair contributes zero net momentum.
            acc[i][0] += bodies[j].mass * dx * inv;
            acc[i][1] += bodies[j].mass * dy * inv;
            acc[j][0] -= bodies[i].mass * dx * inv;
            acc[j][1] -= bodies[i].mass * dy * inv;
        }
    }
    acc
}

/// One kick-drift-kick leapfrog step.
pub fn three_body_step(state: &BodyState, dt: f64, gravity: &Gravity) -> Result<BodyState> {
    if !(dt > 0.0) {
        return Err(LabError::Simulation(format!("dt must be positive, got {dt}")));
    }
    if !is_finite(state) {
        return Err(LabError::Simulation("non-finite body state".into()));
    }
    let mut bodies = state.bodies.clone();
    let acc = accelerations(&bodies, gravity);
    for (b, a) in bodies.iter_mut().zip(&acc) {
        for d in 0..2 {
            b.vel[d] += 0.5 * dt * a[d];
            b.pos[d] += dt * b.vel[d];
        }
    }
    let acc = accelerations(&bodies, gravity);
    for (b, a) in bodies.iter_mut().zip(&acc) {
        for d in 0..2 {
            b.vel[d] += 0.5 * dt * a[d];
        }
    }
    let next = BodyState { bodies };
    if !is_finite(&next) {
        return Err(LabError::Simulation("integration diverged".into()));
    }
    Ok(next)
}

fn is_finite(state: &BodyState) -> bool {
    state
        .bodies
        .iter()
        .all(|b| b.pos.iter().chain(&b.vel).all(|v| v.is_finite()) && b.mass.is_finite())
}

/// Kinetic plus softened pairwise potential energy.
pub fn total_energy(state: &BodyState, gravity: &Gravity) -> f64 {
    let eps2 = gravity.softening * gravity.softening;
    let b = &state.bodies;
    let kinetic: f64 = b
        .iter()
        .map(|b| 0.5 * b.mass * (b.vel[0] * b.vel[0] + b.vel[1] * b.vel[1]))
        .sum();
    let mut potential = 0.0;
    for i in 0..b.len() {
        for j in (i + 1)..b.len() {
            let dx = b[j].pos[0] - b[i].pos[0];
            let dy = b[j].pos[1] - b[i].pos[1];
            potential -= gravity.g * b[i].mass * b[j].mass / (dx * dx + dy * dy + eps2).sqrt();
        }
    }
    kinetic + potential
}

pub fn total_momentum(state: &BodyState) -> [f64; 2] {
    state.bodies.iter().fold([0.0; 2], |acc, b| {
        [acc[0] + b.mass * b.vel[0], acc[1] + b.mass * b.vel[1]]
    })
}

impl BodyConfig {
    /// Advances one observation frame.
    pub fn advance(&self, state: &BodyState) -> Result<BodyState> {
        let mut s = state.clone();
        for _ in 0..self.substeps {
            s = three_body_step(&s, self.dt, &self.gravity)?;
        }
        Ok(s)
    }

    /// Pixel coordinates (x, y) of a world position; y grows downward.
    pub fn to_pixel(&self, pos: [f64; 2]) -> (f64, f64) {
        let scale = self.image_size as f64 / (2.0 * self.half_extent);
        (
            (pos[0] + self.half_extent) * scale,
            (self.half_extent - pos[1]) * scale,
        )
    }

    fn in_frame(&self, state: &BodyState) -> bool {
        let margin = self.disc_radius * 2.0 * self.half_extent / self.image_size as f64;
        state
            .bodies
            .iter()
            .all(|b| b.pos.iter().all(|p| p.abs() <= self.half_extent - margin))
    }

    fn min_separation(state: &BodyState) -> f64 {
        let b = &state.bodies;
        let mut best = f64::INFINITY;
        for i in 0..b.len() {
            for j in (i + 1)..b.len() {
                let d = ((b[j].pos[0] - b[i].pos[0]).powi(2) + (b[j].pos[1] - b[i].pos[1]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// Samples a roughly rotating configuration with zero total momentum that
    /// stays inside the frame, with bodies at least 0.25 apart, for
    /// `frames` frames after an initial one. Returns the state sequence of
    /// length `frames + 2` (one extra leading frame so every observation has
    /// a predecessor).
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        num_bodies: usize,
        frames: usize,
    ) -> Result<Vec<BodyState>> {
        const MAX_TRIES: usize = 10_000;
        'attempt: for _ in 0..MAX_TRIES {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut bodies = Vec::with_capacity(num_bodies);
            for i in 0..num_bodies {
                let angle = phase
                    + std::f64::consts::TAU * i as f64 / num_bodies as f64
                    + rng.gen_range(-0.3..0.3);
                let radius: f64 = rng.gen_range(0.6..1.1);
                let mass = rng.gen_range(self.mass_range.0..self.mass_range.1);
                let speed = rng.gen_range(0.35..0.6);
                bodies.push(Body {
                    pos: [radius * angle.cos(), radius * angle.sin()],
                    vel: [-speed * angle.sin(), speed * angle.cos()],
                    mass,
                });
            }
            // Move to the center-of-mass frame.
            let m: f64 = bodies.iter().map(|b| b.mass).sum();
            for d in 0..2 {
                let com = bodies.iter().map(|b| b.mass * b.pos[d]).sum::<f64>() / m;
                let vcom = bodies.iter().map(|b| b.mass * b.vel[d]).sum::<f64>() / m;
                for b in &mut bodies {
                    b.pos[d] -= com;
                    b.vel[d] -= vcom;
                }
            }
            let mut states = vec![BodyState { bodies }];
            for _ in 0..=frames {
                let last = states.last().expect("non-empty");
                if !self.in_frame(last) || Self::min_separation(last) < 0.25 {
                    continue 'attempt;
                }
                match self.advance(last) {
                    Ok(s) => states.push(s),
                    Err(_) => continue 'attempt,
                }
            }
            let last = states.last().expect("non-empty");
            if self.in_frame(last) && Self::min_separation(last) >= 0.25 {
                return Ok(states);
            }
        }
        Err(LabError::Simulation(format!(
            "no in-frame trajectory of {frames} frames found in {MAX_TRIES} tries"
        )))
    }
}

fn render_discs(state: &BodyState, colors: &[NamedColor], cfg: &BodyConfig) -> Image {
    let n = cfg.image_size;
    let mut img = Image::new(n, n, 3);
    let r2 = cfg.disc_radius * cfg.disc_radius;
    for (b, color) in state.bodies.iter().zip(colors) {
        let (cx, cy) = cfg.to_pixel(b.pos);
        let rgb = color.to_u8();
        let lo_y = (cy - cfg.disc_radius).floor().max(0.0) as usize;
        let hi_y = ((cy + cfg.disc_radius).ceil().max(0.0) as usize).min(n);
        let lo_x = (cx - cfg.disc_radius).floor().max(0.0) as usize;
        let hi_x = ((cx + cfg.disc_radius).ceil().max(0.0) as usize).min(n);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r2 {
                    img.set_pixel(y, x, &rgb);
                }
            }
        }
    }
    img
}

/// Six-channel observation: previous frame RGB followed by current frame RGB.
pub fn render_bodies(
    state: &BodyState,
    previous: &BodyState,
    colors: &[NamedColor],
    cfg: &BodyConfig,
) -> Result<Image> {
    if colors.len() < state.bodies.len() || state.bodies.len() != previous.bodies.len() {
        return Err(LabError::Contract(
            "one color per body and matching body counts required".into(),
        ));
    }
    Ok(render_discs(previous, colors, cfg).stack_channels(&render_discs(state, colors, cfg)))
}

/// Per-body disc masks of the current frame, `[K][side*side]`.
pub fn body_owner_masks(state: &BodyState, cfg: &BodyConfig) -> Vec<Vec<f32>> {
    let n = cfg.image_size;
    let r2 = cfg.disc_radius * cfg.disc_radius;
    state
        .bodies
        .iter()
        .map(|b| {
            let (cx, cy) = cfg.to_pixel(b.pos);
            let mut m = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r2 {
                        m[y * n + x] = 1.0;
                    }
                }
            }
            m
        })
        .collect()
}
