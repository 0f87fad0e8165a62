//! Binary dataset container for experience buffers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SLTDATA\0" | version u32 | env id u8 | K u32 | channels u32 | H u32 | W u32
//! | N u32 | T u32 | grid size u32 | role u8 | seed u64
//! | split descriptor (u32 length + TOML) | environment (u32 length + TOML)
//! | provenance (u32 length + TOML)
//! then per episode: T+1 frames (u8, H×W×C), T actions (object u8, direction u8;
//! 255,255 = none), T+1 state records.
//! ```
//!
//! Grid state records are K × (row, col, shape, color) bytes. Body state
//! records are previous then current frame, each K × (x, y, vx, vy, mass) f64.

use std::io::{Read, Write};

use serde::Serialize;

use super::bodies::{Body, BodyState};
use super::buffer::{Episode, ExperienceBuffer, Role, SimState};
use super::catalog::ObjectAttr;
use super::grid::{Direction, GridAction, GridState};
use super::image::Image;
use super::{EnvKind, EnvSpec};
use crate::error::{LabError, Result};
use crate::oodgen::SplitSpec;

pub const MAGIC: &[u8; 8] = b"SLTDATA\0";
pub const VERSION: u32 = 1;
const NO_ACTION: u8 = 255;

/// Everything stored ahead of the episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub env: EnvKind,
    pub num_objects: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub episodes: usize,
    pub steps: usize,
    pub grid_size: usize,
    pub role: Role,
    #[serde(with = "crate::provenance::seed_format")]
    pub seed: u64,
    pub provenance: String,
    pub environment: EnvSpec,
    pub split: SplitSpec,
}

impl DatasetHeader {
    pub fn of(buffer: &ExperienceBuffer, provenance: &str) -> Self {
        let [channels, height, width] = buffer.env.obs_shape();
        Self {
            version: VERSION,
            env: buffer.env.kind,
            num_objects: buffer.env.num_objects,
            channels,
            height,
            width,
            episodes: buffer.episodes.len(),
            steps: buffer.steps(),
            grid_size: buffer.env.grid_size,
            role: buffer.role,
            seed: buffer.seed,
            provenance: provenance.to_string(),
            environment: buffer.env.clone(),
            split: buffer.split.clone(),
        }
    }

    /// Human-readable TOML rendering of the header.
    pub fn manifest(&self) -> String {
        toml::to_string(self).expect("header serializes")
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| LabError::Format(format!("{what} {v} exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&u32_of(s.len(), "string length")?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn small(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v)
        .ok()
        .filter(|&b| b != NO_ACTION)
        .ok_or_else(|| LabError::Format(format!("{what} {v} does not fit a byte")))
}

/// Serializes a buffer with its provenance block.
pub fn encode_buffer(buffer: &ExperienceBuffer, provenance: &str) -> Result<Vec<u8>> {
    let h = DatasetHeader::of(buffer, provenance);
    if buffer.episodes.iter().any(|e| e.len() != h.steps) {
        return Err(LabError::Format("episodes must share one length".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(h.env.id());
    for (v, what) in [
        (h.num_objects, "K"),
        (h.channels, "channels"),
        (h.height, "height"),
        (h.width, "width"),
        (h.episodes, "episodes"),
        (h.steps, "steps"),
        (h.grid_size, "grid size"),
    ] {
        out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    out.push(h.role.id());
    out.extend_from_slice(&h.seed.to_le_bytes());
    put_str(&mut out, &buffer.split.to_toml())?;
    put_str(&mut out, &toml::to_string(&buffer.env).expect("env serializes"))?;
    put_str(&mut out, provenance)?;
    let frame_len = h.channels * h.height * h.width;
    for ep in &buffer.episodes {
        for img in &ep.observations {
            if img.data().len() != frame_len {
                return Err(LabError::Format("frame size differs from header".into()));
            }
            out.extend_from_slice(img.data());
        }
        for a in &ep.actions {
            match a {
                Some(a) => {
                    out.push(small(a.object, "object index")?);
                    out.push(a.direction.index() as u8);
                }
                None => out.extend_from_slice(&[NO_ACTION, NO_ACTION]),
            }
        }
        for s in &ep.states {
            match s {
                SimState::Grid(g) => {
                    for (&(r, c), a) in g.positions.iter().zip(&g.attributes) {
                        for (v, what) in [(r, "row"), (c, "col"), (a.shape, "shape"), (a.color, "color")] {
                            out.push(small(v, what)?);
                        }
                    }
                }
                SimState::Bodies { previous, current } => {
                    for b in previous.bodies.iter().chain(&current.bodies) {
                        for v in [b.pos[0], b.pos[1], b.vel[0], b.vel[1], b.mass] {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_buffer<W: Write>(buffer: &ExperienceBuffer, provenance: &str, mut w: W) -> std::io::Result<()> {
    let bytes = encode_buffer(buffer, provenance)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    w.write_all(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(LabError::Format(format!("truncated at byte {}", self.at)));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LabError::Format("string is not UTF-8".into()))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<DatasetHeader> {
    if r.take(8)? != MAGIC {
        return Err(LabError::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(LabError::Format(format!("unsupported dataset version {version}")));
    }
    let env = EnvKind::from_id(r.u8()?)?;
    let num_objects = r.u32()?;
    let channels = r.u32()?;
    let height = r.u32()?;
    let width = r.u32()?;
    let episodes = r.u32()?;
    let steps = r.u32()?;
    let grid_size = r.u32()?;
    let role = Role::from_id(r.u8()?)?;
    let seed = r.u64()?;
    let split = SplitSpec::from_toml(&r.string()?)?;
    let environment: EnvSpec =
        toml::from_str(&r.string()?).map_err(|e| LabError::Format(format!("environment block: {e}")))?;
    let provenance = r.string()?;
    if environment.kind != env
        || environment.num_objects != num_objects
        || environment.obs_shape() != [channels, height, width]
    {
        return Err(LabError::Format("environment block disagrees with header".into()));
    }
    Ok(DatasetHeader {
        version,
        env,
        num_objects,
        channels,
        height,
        width,
        episodes,
        steps,
        grid_size,
        role,
        seed,
        provenance,
        environment,
        split,
    })
}

/// Parses only the header.
pub fn decode_header(bytes: &[u8]) -> Result<DatasetHeader> {
    read_header(&mut Reader { bytes, at: 0 })
}

pub fn decode_buffer(bytes: &[u8]) -> Result<(ExperienceBuffer, DatasetHeader)> {
    let mut r = Reader { bytes, at: 0 };
    let h = read_header(&mut r)?;
    let frame_len = h.channels * h.height * h.width;
    let mut episodes = Vec::with_capacity(h.episodes);
    for _ in 0..h.episodes {
        let mut observations = Vec::with_capacity(h.steps + 1);
        for _ in 0..=h.steps {
            let data = r.take(frame_len)?.to_vec();
            observations.push(Image::from_raw(h.height, h.width, h.channels, data).expect("length checked"));
        }
        let mut actions = Vec::with_capacity(h.steps);
        for _ in 0..h.steps {
            let (o, d) = (r.u8()?, r.u8()?);
            actions.push(if o == NO_ACTION {
                None
            } else {
                let direction = Direction::from_index(d as usize)
                    .ok_or_else(|| LabError::Format(format!("bad direction {d}")))?;
                Some(GridAction::new(o as usize, direction))
            });
        }
        let mut states = Vec::with_capacity(h.steps + 1);
        for _ in 0..=h.steps {
            states.push(match h.env {
                EnvKind::ThreeBody => {
                    let mut frames = [Vec::new(), Vec::new()];
                    for frame in &mut frames {
                        for _ in 0..h.num_objects {
                            let (x, y, vx, vy, mass) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                            frame.push(Body {
                                pos: [x, y],
                                vel: [vx, vy],
                                mass,
                            });
                        }
                    }
                    let [previous, current] = frames;
                    SimState::Bodies {
                        previous: BodyState { bodies: previous },
                        current: BodyState { bodies: current },
                    }
                }
                _ => {
                    let mut positions = Vec::with_capacity(h.num_objects);
                    let mut attributes = Vec::with_capacity(h.num_objects);
                    for _ in 0..h.num_objects {
                        let b = r.take(4)?;
                        positions.push((b[0] as usize, b[1] as usize));
                        attributes.push(ObjectAttr::new(b[2] as usize, b[3] as usize));
                    }
                    SimState::Grid(GridState {
                        size: h.grid_size,
                        positions,
                        attributes,
                    })
                }
            });
        }
        episodes.push(Episode {
            observations,
            actions,
            states,
        });
    }
    if r.at != bytes.len() {
        return Err(LabError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let buffer = ExperienceBuffer {
        env: h.environment.clone(),
        split: h.split.clone(),
        role: h.role,
        seed: h.seed,
        episodes,
    };
    Ok((buffer, h))
}

pub fn read_buffer<R: Read>(mut r: R) -> Result<(ExperienceBuffer, DatasetHeader)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| LabError::Format(format!("reading dataset: {e}")))?;
    decode_buffer(&bytes)
}
