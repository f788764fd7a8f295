//! Synthetic cuboid cities: procedural generation, ray-cast ground truth,
//! point-cloud projection, prediction noise and cuboid map approximation.
//!
//! World frame: y is up, the ground is the plane `y = 0`. Building geometry
//! is stored on a dyadic grid (positions in multiples of [`POSITION_QUANTUM`],
//! yaw in multiples of [`YAW_QUANTUM`]) so fitted approximations of exact
//! cuboids reproduce them bit for bit.

mod approx;
mod city;
mod noise;
mod render;

pub use approx::{approximate_scene, cuboid_approximation, render_approximate_gt};
pub use city::{
    generate_city, remove_buildings, sample_trajectory, CityPreset, GridLayout, SizeRanges,
    TrajectoryConfig,
};
pub use noise::{simulate_predictions, NoiseModel, Prediction};
pub use render::{
    project_pointcloud, raycast_render, sample_surface_cloud, LabeledPoint, RenderOutput,
};

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Mat3, Vec3};
use crate::labels::{LabelId, FIRST_INSTANCE};

pub const POSITION_QUANTUM: f64 = 1.0 / 1024.0;
pub const YAW_QUANTUM: f64 = 1.0 / 16_777_216.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not place building {index} after {tries} attempts")]
    Placement { index: usize, tries: usize },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("instance {label}: need at least 4 points, got {count}")]
    TooFewPoints { label: LabelId, count: usize },
}

pub(crate) fn snap(x: f64, quantum: f64) -> f64 {
    (x / quantum).round() * quantum
}

/// Wrap a yaw into `[-pi/2, pi/2)`; a cuboid is symmetric under half turns.
pub(crate) fn canonical_yaw(yaw: f64) -> f64 {
    (yaw + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2
}

/// Box building with a vertical yaw axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub center: Vec3,
    pub half_extents: Vec3,
    /// Rotation about world +y, radians; local +x maps to `(cos, 0, -sin)`.
    pub yaw: f64,
    pub instance_label: LabelId,
}

impl Cuboid {
    pub fn rotation(&self) -> Mat3 {
        let (s, c) = self.yaw.sin_cos();
        Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.center + self.rotation() * local
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        self.rotation().transpose() * (world - self.center)
    }

    /// Footprint corners `(x, z)` in world coordinates.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let h = self.half_extents;
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(sx, sz)| {
            let w = self.to_world(&Vec3::new(sx * h.x, 0.0, sz * h.z));
            (w.x, w.z)
        })
    }

    /// Distance from `p` to the cuboid surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let l = self.to_local(p);
        let q = l.abs() - self.half_extents;
        let outside = q.map(|v| v.max(0.0)).norm();
        let inside = q.max().min(0.0);
        (outside + inside).abs()
    }
}

/// Axis-aligned bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Scale about the center by `factor`.
    pub fn inflated(&self, factor: f64) -> Aabb {
        let c = (self.min + self.max) / 2.0;
        let h = (self.max - self.min) / 2.0 * factor;
        Aabb {
            min: c - h,
            max: c + h,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityScene {
    pub buildings: Vec<Cuboid>,
    pub road_segments: usize,
    pub seed: u64,
    pub grid: Option<GridLayout>,
}

impl CityScene {
    pub fn empty(seed: u64) -> Self {
        Self {
            buildings: Vec::new(),
            road_segments: 0,
            seed,
            grid: None,
        }
    }

    pub fn building(&self, label: LabelId) -> Option<&Cuboid> {
        self.buildings.iter().find(|b| b.instance_label == label)
    }

    /// Bounds of all buildings, including the ground from `y = 0`.
    pub fn bounds(&self) -> Aabb {
        if self.buildings.is_empty() {
            if let Some(g) = &self.grid {
                let (w, d) = g.extent();
                return Aabb {
                    min: Vec3::zeros(),
                    max: Vec3::new(w, 1.0, d),
                };
            }
            return Aabb {
                min: Vec3::new(-1.0, 0.0, -1.0),
                max: Vec3::new(1.0, 1.0, 1.0),
            };
        }
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for b in &self.buildings {
            for (x, z) in b.footprint() {
                min = min.inf(&Vec3::new(x, 0.0, z));
                max = max.sup(&Vec3::new(x, b.center.y + b.half_extents.y, z));
            }
        }
        min.y = 0.0;
        Aabb { min, max }
    }

    /// Checks label uniqueness, positive extents, ground contact and overlap.
    pub fn validate(&self) -> Result<(), SceneError> {
        let mut labels = std::collections::BTreeSet::new();
        for b in &self.buildings {
            if b.instance_label < FIRST_INSTANCE {
                return Err(SceneError::Invalid(format!("label {} below instance range", b.instance_label)));
            }
            if !labels.insert(b.instance_label) {
                return Err(SceneError::Invalid(format!("duplicate label {}", b.instance_label)));
            }
            if !(b.half_extents.min() > 0.0) {
                return Err(SceneError::Invalid(format!("building {} has non-positive extent", b.instance_label)));
            }
            if (b.center.y - b.half_extents.y).abs() > 1e-9 {
                return Err(SceneError::Invalid(format!("building {} does not rest on the ground", b.instance_label)));
            }
        }
        for (i, a) in self.buildings.iter().enumerate() {
            for b in &self.buildings[i + 1..] {
                if footprints_overlap(a, b, 0.0) {
                    return Err(SceneError::Invalid(format!(
                        "buildings {} and {} overlap",
                        a.instance_label, b.instance_label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            seed: self.seed,
            buildings: self
                .buildings
                .iter()
                .map(|b| BuildingEntry {
                    center: b.center.into(),
                    half_extents: b.half_extents.into(),
                    yaw: b.yaw,
                    label: b.instance_label,
                })
                .collect(),
            road_segments: self.road_segments,
            grid: self.grid,
        }
    }

    pub fn from_file(file: &SceneFile) -> Result<Self, SceneError> {
        let scene = CityScene {
            buildings: file
                .buildings
                .iter()
                .map(|b| Cuboid {
                    center: Vec3::from(b.center),
                    half_extents: Vec3::from(b.half_extents),
                    yaw: b.yaw,
                    instance_label: b.label,
                })
                .collect(),
            road_segments: file.road_segments,
            seed: file.seed,
            grid: file.grid,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Separating-axis test on the two footprints, each grown by `margin`.
pub(crate) fn footprints_overlap(a: &Cuboid, b: &Cuboid, margin: f64) -> bool {
    let fa = a.footprint();
    let fb = b.footprint();
    let axes = |c: &Cuboid| {
        let (s, co) = c.yaw.sin_cos();
        [(co, -s), (s, co)]
    };
    for (ax, az) in axes(a).into_iter().chain(axes(b)) {
        let project = |f: &[(f64, f64); 4]| {
            f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, z)| {
                let p = x * ax + z * az;
                (lo.min(p), hi.max(p))
            })
        };
        let (alo, ahi) = project(&fa);
        let (blo, bhi) = project(&fb);
        if ahi + margin <= blo || bhi + margin <= alo {
            return false;
        }
    }
    true
}

/// JSON layout of a stored scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    pub buildings: Vec<BuildingEntry>,
    pub road_segments: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingEntry {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub yaw: f64,
    pub label: LabelId,
}
