//! Closed-form fields used as test scenes and oracles.

use serde::{Deserialize, Serialize};

use super::{FieldSample, RadianceField};
use crate::geometry::RoiBox;
use crate::math::Vec3;

/// Raw density reported outside a field's support. Both density
/// activations map it to exactly zero.
pub const EMPTY_RAW_DENSITY: f64 = -1.0e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    UniformSphere { center: Vec3, radius: f64 },
    UniformBox { region: RoiBox },
    /// Density fills `region`; color alternates between the field color and
    /// `alt_raw_color` on a 3D checker of side `cell`.
    Checker { region: RoiBox, cell: f64, alt_raw_color: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub shape: Shape,
    pub raw_density: f64,
    pub raw_color: [f64; 3],
}

impl AnalyticField {
    pub fn sphere(center: Vec3, radius: f64, raw_density: f64, raw_color: [f64; 3]) -> Self {
        Self {
            shape: Shape::UniformSphere { center, radius },
            raw_density,
            raw_color,
        }
    }

    pub fn cuboid(region: RoiBox, raw_density: f64, raw_color: [f64; 3]) -> Self {
        Self {
            shape: Shape::UniformBox { region },
            raw_density,
            raw_color,
        }
    }

    /// A field with no density anywhere.
    pub fn empty() -> Self {
        Self::sphere(Vec3::ZERO, 1.0, EMPTY_RAW_DENSITY, [0.0; 3])
    }

    pub fn inside(&self, p: Vec3) -> bool {
        match &self.shape {
            Shape::UniformSphere { center, radius } => p.distance(*center) <= *radius,
            Shape::UniformBox { region } | Shape::Checker { region, .. } => region.contains(p),
        }
    }
}

impl RadianceField for AnalyticField {
    fn eval(&self, position: Vec3, _direction: Vec3) -> FieldSample {
        if !self.inside(position) {
            return FieldSample {
                raw_density: EMPTY_RAW_DENSITY,
                raw_color: self.raw_color,
            };
        }
        let raw_color = match &self.shape {
            Shape::Checker {
                cell, alt_raw_color, ..
            } => {
                let parity = (position.x / cell).floor() + (position.y / cell).floor() + (position.z / cell).floor();
                if parity.rem_euclid(2.0) < 0.5 {
                    self.raw_color
                } else {
                    *alt_raw_color
                }
            }
            _ => self.raw_color,
        };
        FieldSample {
            raw_density: self.raw_density,
            raw_color,
        }
    }
}

/// Union of analytic parts; the part with the largest raw density wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub parts: Vec<AnalyticField>,
}

impl AnalyticScene {
    pub fn new(parts: Vec<AnalyticField>) -> Self {
        Self { parts }
    }

    /// The bundled test scene: a checkered floor, a red sphere and a blue
    /// block, with empty space around `(0, -0.5, 1)` for insertions.
    pub fn test_scene() -> Self {
        let floor = RoiBox::from_min_max(Vec3::new(-2.0, -1.2, -2.0), Vec3::new(2.0, -1.0, 2.0)).expect("floor");
        let block = RoiBox::new(Vec3::new(0.7, -0.7, -0.3), Vec3::new(0.5, 0.6, 0.5)).expect("block");
        Self::new(vec![
            AnalyticField {
                shape: Shape::Checker {
                    region: floor,
                    cell: 0.5,
                    alt_raw_color: [-1.5, -1.5, -1.5],
                },
                raw_density: 8.0,
                raw_color: [1.5, 1.5, 1.5],
            },
            AnalyticField::sphere(Vec3::new(-0.6, -0.5, 0.0), 0.5, 6.0, [2.0, -1.5, -1.5]),
            AnalyticField::cuboid(block, 6.0, [-1.5, -0.5, 2.0]),
        ])
    }

    /// Empty region of [`AnalyticScene::test_scene`] used for insertion edits.
    pub fn test_scene_empty_roi() -> RoiBox {
        RoiBox::new(Vec3::new(0.0, -0.5, 1.0), Vec3::splat(0.8)).expect("roi")
    }
}

impl RadianceField for AnalyticScene {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample {
        let mut best = FieldSample {
            raw_density: EMPTY_RAW_DENSITY,
            raw_color: [0.0; 3],
        };
        for part in &self.parts {
            let s = part.eval(position, direction);
            if s.raw_density > best.raw_density {
                best = s;
            }
        }
        best
    }
}
