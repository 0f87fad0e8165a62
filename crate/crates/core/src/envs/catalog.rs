//! Object attributes: 10×10 shape stencils and RGB colors.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Side length of a shape stencil and of one grid cell, in pixels.
pub const CELL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Triangle,
    Circle,
    Diamond,
    Cross,
    Pentagon,
    Ring,
    Tee,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::Triangle,
        Shape::Circle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Pentagon,
        Shape::Ring,
        Shape::Tee,
    ];

    fn stencil(self) -> &'static [&'static str; CELL] {
        match self {
            Shape::Square => &SQUARE,
            Shape::Triangle => &TRIANGLE,
            Shape::Circle => &CIRCLE,
            Shape::Diamond => &DIAMOND,
            Shape::Cross => &CROSS,
            Shape::Pentagon => &PENTAGON,
            Shape::Ring => &RING,
            Shape::Tee => &TEE,
        }
    }

    /// Whether stencil pixel (row, col) is filled.
    pub fn covers(self, row: usize, col: usize) -> bool {
        self.stencil()[row].as_bytes()[col] == b'#'
    }

    pub fn area(self) -> usize {
        self.stencil()
            .iter()
            .map(|r| r.bytes().filter(|&b| b == b'#').count())
            .sum()
    }
}

const SQUARE: [&str; CELL] = [
    "##########",
    "##########",
    "##########",
    "##########",
    "##########",
    "##########",
    "##########",
    "##########",
    "##########",
    "##########",
];

const TRIANGLE: [&str; CELL] = [
    "....##....",
    "....##....",
    "...####...",
    "...####...",
    "..######..",
    "..######..",
    ".########.",
    ".########.",
    "##########",
    "##########",
];

const CIRCLE: [&str; CELL] = [
    "...####...",
    ".########.",
    ".########.",
    "##########",
    "##########",
    "##########",
    "##########",
    ".########.",
    ".########.",
    "...####...",
];

const DIAMOND: [&str; CELL] = [
    "....##....",
    "...####...",
    "..######..",
    ".########.",
    "##########",
    "##########",
    ".########.",
    "..######..",
    "...####...",
    "....##....",
];

const CROSS: [&str; CELL] = [
    "...####...",
    "...####...",
    "...####...",
    "##########",
    "##########",
    "##########",
    "##########",
    "...####...",
    "...####...",
    "...####...",
];

const PENTAGON: [&str; CELL] = [
    "....##....",
    "...####...",
    "..######..",
    ".########.",
    "##########",
    "##########",
    ".########.",
    ".########.",
    "..######..",
    "..######..",
];

const RING: [&str; CELL] = [
    "##########",
    "##########",
    "##......##",
    "##......##",
    "##......##",
    "##......##",
    "##......##",
    "##......##",
    "##########",
    "##########",
];

const TEE: [&str; CELL] = [
    "##########",
    "##########",
    "##########",
    "...####...",
    "...####...",
    "...####...",
    "...####...",
    "...####...",
    "...####...",
    "...####...",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f32; 3],
}

impl NamedColor {
    pub fn new(name: &str, rgb: [f32; 3]) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }

    pub fn to_u8(&self) -> [u8; 3] {
        self.rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
    }
}

/// Ordered pools of shapes and colors that object attributes index into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCatalog {
    pub shapes: Vec<Shape>,
    pub colors: Vec<NamedColor>,
}

impl Default for AttributeCatalog {
    /// Six shapes and six colors; the last of each is never used by the
    /// default training assignment.
    fn default() -> Self {
        Self {
            shapes: Shape::ALL[..6].to_vec(),
            colors: vec![
                NamedColor::new("red", [1.0, 0.0, 0.0]),
                NamedColor::new("blue", [0.0, 0.0, 1.0]),
                NamedColor::new("green", [0.0, 1.0, 0.0]),
                NamedColor::new("yellow", [1.0, 1.0, 0.0]),
                NamedColor::new("purple", [0.6, 0.2, 1.0]),
                NamedColor::new("cyan", [0.0, 1.0, 1.0]),
            ],
        }
    }
}

impl AttributeCatalog {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.shapes.iter().enumerate() {
            if self.shapes[..i].contains(s) {
                return Err(LabError::Catalog(format!("duplicate shape {s:?}")));
            }
        }
        for (i, c) in self.colors.iter().enumerate() {
            if self.colors[..i].iter().any(|o| o.rgb == c.rgb || o.name == c.name) {
                return Err(LabError::Catalog(format!("duplicate color {}", c.name)));
            }
            if c.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(LabError::Catalog(format!("color {} outside [0,1]", c.name)));
            }
        }
        Ok(())
    }

    pub fn shape(&self, id: usize) -> Result<Shape> {
        self.shapes
            .get(id)
            .copied()
            .ok_or_else(|| LabError::Catalog(format!("unknown shape id {id}")))
    }

    pub fn color(&self, id: usize) -> Result<&NamedColor> {
        self.colors
            .get(id)
            .ok_or_else(|| LabError::Catalog(format!("unknown color id {id}")))
    }
}

/// Shape and color of one object, as indices into an [`AttributeCatalog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectAttr {
    pub shape: usize,
    pub color: usize,
}

impl ObjectAttr {
    pub fn new(shape: usize, color: usize) -> Self {
        Self { shape, color }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_are_distinct_and_square_fills_cell() {
        assert_eq!(Shape::Square.area(), 100);
        for (i, a) in Shape::ALL.iter().enumerate() {
            for b in &Shape::ALL[..i] {
                let differs = (0..CELL).any(|r| (0..CELL).any(|c| a.covers(r, c) != b.covers(r, c)));
                assert!(differs, "{a:?} and {b:?} share a stencil");
            }
            for row in a.stencil() {
                assert_eq!(row.len(), CELL);
            }
        }
    }

    #[test]
    fn default_catalog_is_valid() {
        let cat = AttributeCatalog::default();
        cat.validate().unwrap();
        assert_eq!(cat.shapes.len(), 6);
        assert_eq!(cat.colors.len(), 6);
        assert!(cat.shape(6).is_err());
        let mut dup = cat.clone();
        dup.colors.push(dup.colors[0].clone());
        assert!(dup.validate().is_err());
    }
}
