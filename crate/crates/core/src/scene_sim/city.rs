use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{canonical_yaw, footprints_overlap, snap, CityScene, Cuboid, SceneError, POSITION_QUANTUM, YAW_QUANTUM};
use crate::geometry::{level_camera_rotation, Pose, Vec3};
use crate::labels::FIRST_INSTANCE;

const PLACEMENT_TRIES: usize = 500;
/// Free space kept between a building and its block edge or neighbours.
const LOT_MARGIN: f64 = 1.5;

/// Axis-aligned street grid. Block `(i, j)` spans
/// `x in [road + i * pitch, road + i * pitch + block]`, likewise in z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub blocks_x: usize,
    pub blocks_z: usize,
    pub block_size: f64,
    pub road_width: f64,
}

impl GridLayout {
    pub fn pitch(&self) -> f64 {
        self.block_size + self.road_width
    }

    pub fn extent(&self) -> (f64, f64) {
        let p = self.pitch();
        (
            self.blocks_x as f64 * p + self.road_width,
            self.blocks_z as f64 * p + self.road_width,
        )
    }

    /// Street segments between neighbouring intersections.
    pub fn road_segment_count(&self) -> usize {
        self.blocks_x * (self.blocks_z + 1) + self.blocks_z * (self.blocks_x + 1)
    }

    /// Center and unit direction of every street segment.
    pub fn road_segments(&self) -> Vec<(Vec3, Vec3)> {
        let p = self.pitch();
        let half = self.road_width / 2.0;
        let mut out = Vec::with_capacity(self.road_segment_count());
        for j in 0..=self.blocks_z {
            for i in 0..self.blocks_x {
                out.push((Vec3::new(half + i as f64 * p + p / 2.0, 0.0, half + j as f64 * p), Vec3::x()));
            }
        }
        for i in 0..=self.blocks_x {
            for j in 0..self.blocks_z {
                out.push((Vec3::new(half + i as f64 * p, 0.0, half + j as f64 * p + p / 2.0), Vec3::z()));
            }
        }
        out
    }

    fn block_origin(&self, i: usize, j: usize) -> (f64, f64) {
        let p = self.pitch();
        (self.road_width + i as f64 * p, self.road_width + j as f64 * p)
    }
}

/// Ranges for building dimensions, in meters and radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRanges {
    /// Half length of the long footprint side.
    pub half_length: [f64; 2],
    /// Short side over long side.
    pub aspect: [f64; 2],
    pub height: [f64; 2],
    /// Yaw perturbation around the street axes.
    pub yaw_jitter: f64,
}

impl Default for SizeRanges {
    fn default() -> Self {
        Self {
            half_length: [5.0, 14.0],
            aspect: [0.4, 0.85],
            height: [8.0, 40.0],
            yaw_jitter: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CityPreset {
    pub buildings: usize,
    pub grid: GridLayout,
    pub sizes: SizeRanges,
}

impl CityPreset {
    /// 102 buildings on a 13 x 12 block grid.
    pub fn small() -> Self {
        Self {
            buildings: 102,
            grid: GridLayout {
                blocks_x: 13,
                blocks_z: 12,
                block_size: 40.0,
                road_width: 12.0,
            },
            sizes: SizeRanges::default(),
        }
    }

    /// 827 buildings on a 30 x 29 block grid.
    pub fn large() -> Self {
        Self {
            buildings: 827,
            grid: GridLayout {
                blocks_x: 30,
                blocks_z: 29,
                block_size: 40.0,
                road_width: 12.0,
            },
            sizes: SizeRanges::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<(), SceneError> {
    if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
        return Err(SceneError::Parameter(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

/// Seeded procedural city. Buildings are placed by rejection sampling into
/// random blocks; the same arguments always produce the same scene.
pub fn generate_city(
    n_buildings: usize,
    grid: GridLayout,
    sizes: SizeRanges,
    seed: u64,
) -> Result<CityScene, SceneError> {
    check_range("half_length", sizes.half_length)?;
    check_range("aspect", sizes.aspect)?;
    check_range("height", sizes.height)?;
    if sizes.aspect[1] > 1.0 {
        return Err(SceneError::Parameter("aspect must not exceed 1".into()));
    }
    if grid.blocks_x == 0 || grid.blocks_z == 0 || !(grid.block_size > 0.0) || !(grid.road_width > 0.0) {
        return Err(SceneError::Parameter("grid must have positive size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buildings: Vec<Cuboid> = Vec::with_capacity(n_buildings);
    for index in 0..n_buildings {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let candidate = propose(&mut rng, &grid, &sizes, FIRST_INSTANCE + index as u32);
            if !fits_block(&candidate, &grid) {
                continue;
            }
            if buildings.iter().any(|b| footprints_overlap(b, &candidate, LOT_MARGIN)) {
                continue;
            }
            placed = Some(candidate);
            break;
        }
        let b = placed.ok_or(SceneError::Placement {
            index,
            tries: PLACEMENT_TRIES,
        })?;
        buildings.push(b);
    }
    Ok(CityScene {
        buildings,
        road_segments: grid.road_segment_count(),
        seed,
        grid: Some(grid),
    })
}

fn propose(rng: &mut ChaCha8Rng, grid: &GridLayout, sizes: &SizeRanges, label: u32) -> Cuboid {
    let i = rng.random_range(0..grid.blocks_x);
    let j = rng.random_range(0..grid.blocks_z);
    let long = rng.random_range(sizes.half_length[0]..=sizes.half_length[1]);
    let short = long * rng.random_range(sizes.aspect[0]..=sizes.aspect[1]);
    let height = rng.random_range(sizes.height[0]..=sizes.height[1]);
    let turn = if rng.random_bool(0.5) { FRAC_PI_2 } else { 0.0 };
    let jitter = if sizes.yaw_jitter > 0.0 {
        rng.random_range(-sizes.yaw_jitter..=sizes.yaw_jitter)
    } else {
        0.0
    };
    let (bx, bz) = grid.block_origin(i, j);
    let cx = bx + rng.random_range(0.0..=grid.block_size);
    let cz = bz + rng.random_range(0.0..=grid.block_size);
    let half_y = snap(height / 2.0, POSITION_QUANTUM);
    Cuboid {
        center: Vec3::new(snap(cx, POSITION_QUANTUM), half_y, snap(cz, POSITION_QUANTUM)),
        half_extents: Vec3::new(snap(long, POSITION_QUANTUM), half_y, snap(short, POSITION_QUANTUM)),
        yaw: snap(canonical_yaw(turn + jitter), YAW_QUANTUM),
        instance_label: label,
    }
}

fn fits_block(c: &Cuboid, grid: &GridLayout) -> bool {
    let p = grid.pitch();
    let i = ((c.center.x - grid.road_width) / p).floor();
    let j = ((c.center.z - grid.road_width) / p).floor();
    if i < 0.0 || j < 0.0 {
        return false;
    }
    let (bx, bz) = grid.block_origin(i as usize, j as usize);
    c.footprint().iter().all(|&(x, z)| {
        x >= bx + LOT_MARGIN
            && x <= bx + grid.block_size - LOT_MARGIN
            && z >= bz + LOT_MARGIN
            && z <= bz + grid.block_size - LOT_MARGIN
    })
}

/// Delete a seeded uniform sample of `floor(fraction * N)` buildings.
pub fn remove_buildings(scene: &CityScene, fraction: f64, seed: u64) -> Result<CityScene, SceneError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SceneError::Parameter(format!("fraction {fraction} outside [0, 1]")));
    }
    let n = scene.buildings.len();
    let k = (fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        removed[i] = true;
    }
    Ok(CityScene {
        buildings: scene
            .buildings
            .iter()
            .zip(&removed)
            .filter(|(_, r)| !**r)
            .map(|(b, _)| *b)
            .collect(),
        ..scene.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryConfig {
    pub count: usize,
    pub seed: u64,
    /// Camera height range above the ground, meters.
    pub height: [f64; 2],
    /// Fraction of the segment half-length the camera may move along it.
    pub along_jitter: f64,
    /// Lateral offset range as a fraction of the half road width.
    pub across_jitter: f64,
    /// Max pitch and roll, radians.
    pub tilt: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            height: [1.5, 3.0],
            along_jitter: 0.6,
            across_jitter: 0.5,
            tilt: 0.05,
        }
    }
}

/// Camera poses near street-segment centers with seeded jitter. Frame ids are
/// `f00000`, `f00001`, ...
pub fn sample_trajectory(scene: &CityScene, cfg: &TrajectoryConfig) -> Result<Vec<(String, Pose)>, SceneError> {
    let grid = scene
        .grid
        .ok_or_else(|| SceneError::Parameter("scene has no street grid".into()))?;
    let segments = grid.road_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half_seg = grid.pitch() / 2.0;
    let half_road = grid.road_width / 2.0;
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        let (center, dir) = segments[rng.random_range(0..segments.len())];
        let lateral = Vec3::new(dir.z, 0.0, dir.x);
        let along = rng.random_range(-1.0..=1.0) * cfg.along_jitter * half_seg;
        let across = rng.random_range(-1.0..=1.0) * cfg.across_jitter * half_road;
        let h = rng.random_range(cfg.height[0]..=cfg.height[1]);
        let pos = center + dir * along + lateral * across + Vec3::new(0.0, h, 0.0);
        let yaw = rng.random_range(-PI..PI);
        let pitch = rng.random_range(-1.0..=1.0) * cfg.tilt;
        let roll = rng.random_range(-1.0..=1.0) * cfg.tilt;
        out.push((format!("f{k:05}"), Pose::from_center(level_camera_rotation(yaw, pitch, roll), pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_preset_has_102_buildings_and_no_overlap() {
        let p = CityPreset::small();
        let scene = generate_city(p.buildings, p.grid, p.sizes, 7).unwrap();
        assert_eq!(scene.buildings.len(), 102);
        scene.validate().unwrap();
        for b in &scene.buildings {
            assert!(b.half_extents.x >= b.half_extents.z);
            assert_eq!(b.center.y, b.half_extents.y);
            assert_eq!(super::super::snap(b.yaw, YAW_QUANTUM), b.yaw);
        }
    }

    #[test]
    fn zero_buildings_is_ground_only() {
        let p = CityPreset::small();
        let scene = generate_city(0, p.grid, p.sizes, 1).unwrap();
        assert!(scene.buildings.is_empty());
    }

    #[test]
    fn same_seed_same_json() {
        let p = CityPreset::small();
        let a = generate_city(30, p.grid, p.sizes, 99).unwrap();
        let b = generate_city(30, p.grid, p.sizes, 99).unwrap();
        assert_eq!(
            serde_json::to_string(&a.to_file()).unwrap(),
            serde_json::to_string(&b.to_file()).unwrap()
        );
        let c = generate_city(30, p.grid, p.sizes, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_density_fails() {
        let grid = GridLayout {
            blocks_x: 1,
            blocks_z: 1,
            block_size: 40.0,
            road_width: 10.0,
        };
        let err = generate_city(50, grid, SizeRanges::default(), 3).unwrap_err();
        assert!(matches!(err, SceneError::Placement { .. }));
    }

    #[test]
    fn road_segment_count_matches_list() {
        let g = CityPreset::small().grid;
        assert_eq!(g.road_segments().len(), g.road_segment_count());
    }

    #[test]
    fn removal_counts_and_determinism() {
        let p = CityPreset::small();
        let scene = generate_city(p.buildings, p.grid, p.sizes, 7).unwrap();
        let a = remove_buildings(&scene, 0.2, 5).unwrap();
        assert_eq!(a.buildings.len(), 82);
        assert_eq!(a, remove_buildings(&scene, 0.2, 5).unwrap());
        assert_eq!(remove_buildings(&scene, 0.0, 5).unwrap(), scene);
        for b in &a.buildings {
            assert_eq!(scene.building(b.instance_label), Some(b));
        }
        assert!(remove_buildings(&scene, 1.5, 5).is_err());
    }

    #[test]
    fn trajectory_stays_on_streets() {
        let p = CityPreset::small();
        let scene = generate_city(p.buildings, p.grid, p.sizes, 7).unwrap();
        let poses = sample_trajectory(&scene, &TrajectoryConfig::default()).unwrap();
        assert_eq!(poses.len(), 100);
        for (_, pose) in &poses {
            let c = pose.center();
            assert!(c.y >= 1.5 && c.y <= 3.0);
            assert!(scene.buildings.iter().all(|b| b.surface_distance(&c) > 0.5));
        }
    }
}
