use super::{CityScene, Cuboid};
use crate::geometry::{bearing_to_pixel_index, pixel_to_bearing, ImageDims, Mat3, PixelCoord, Pose, Vec3};
use crate::image::{LabelImage, SceneCoordinateImage};
use crate::labels::{LabelId, ROAD, SKY, VOID};

/// Hits closer than this along a ray are ignored.
const RAY_EPSILON: f64 = 1e-9;

pub type LabeledPoint = (Vec3, LabelId);

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub coords: SceneCoordinateImage,
    pub labels: LabelImage,
}

struct PreparedBox {
    center: Vec3,
    half: Vec3,
    to_local: Mat3,
    radius: f64,
    label: LabelId,
}

impl PreparedBox {
    fn new(c: &Cuboid) -> Self {
        Self {
            center: c.center,
            half: c.half_extents,
            to_local: c.rotation().transpose(),
            radius: c.half_extents.norm(),
            label: c.instance_label,
        }
    }

    /// Slab test in the box frame; returns the first positive ray parameter.
    fn intersect(&self, origin_local: &Vec3, dir: &Vec3) -> Option<f64> {
        let d = self.to_local * dir;
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for k in 0..3 {
            let o = origin_local[k];
            let h = self.half[k];
            if d[k] == 0.0 {
                if o < -h || o > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[k];
            let (mut t0, mut t1) = ((-h - o) * inv, (h - o) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_near > RAY_EPSILON {
            Some(t_near)
        } else if t_far > RAY_EPSILON {
            Some(t_far)
        } else {
            None
        }
    }
}

/// Ray-cast ground-truth scene coordinates and panoptic labels.
///
/// Rays hitting nothing are labeled sky with invalid coordinates; the ground
/// plane carries the road class.
pub fn raycast_render(scene: &CityScene, pose: &Pose, dims: ImageDims) -> RenderOutput {
    let origin = pose.center();
    // nearest boxes first so most rays can stop early
    let mut boxes: Vec<(f64, PreparedBox)> = scene
        .buildings
        .iter()
        .map(|c| {
            let b = PreparedBox::new(c);
            ((b.center - origin).norm() - b.radius, b)
        })
        .collect();
    boxes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let local_origins: Vec<Vec3> = boxes.iter().map(|(_, b)| b.to_local * (origin - b.center)).collect();

    let mut coords = SceneCoordinateImage::invalid(dims);
    let mut labels = LabelImage::filled(dims, SKY);
    for row in 0..dims.height {
        for col in 0..dims.width {
            let bearing = pixel_to_bearing(PixelCoord { u: col as f64, v: row as f64 }, dims)
                .expect("pixel center in range");
            let dir = pose.rotation * bearing.as_vec();
            let mut best_t = f64::INFINITY;
            let mut best_label = SKY;
            if dir.y < 0.0 && origin.y > 0.0 {
                best_t = -origin.y / dir.y;
                best_label = ROAD;
            }
            for ((lower, b), o) in boxes.iter().zip(&local_origins) {
                if *lower >= best_t {
                    break;
                }
                if let Some(t) = b.intersect(o, &dir) {
                    if t < best_t {
                        best_t = t;
                        best_label = b.label;
                    }
                }
            }
            let i = coords.index(col, row);
            labels.set(i, best_label);
            if best_label != SKY {
                let mut hit = origin + dir * best_t;
                if best_label == ROAD {
                    hit.y = 0.0;
                }
                coords.set(i, Some(hit));
            }
        }
    }
    RenderOutput { coords, labels }
}

/// Z-buffer projection of a labeled cloud. Each pixel keeps the nearest point
/// whose label equals the pixel's reference label: the supplied label image
/// when given, otherwise the label of the nearest point in that pixel.
pub fn project_pointcloud(
    cloud: &[LabeledPoint],
    pose: &Pose,
    dims: ImageDims,
    reference: Option<&LabelImage>,
) -> RenderOutput {
    let n = dims.pixel_count();
    let mut depth = vec![f64::INFINITY; n];
    let mut chosen: Vec<Option<usize>> = vec![None; n];
    let mut projected = Vec::with_capacity(cloud.len());
    for (k, (p, _)) in cloud.iter().enumerate() {
        let cam = pose.world_to_camera(p);
        let d = cam.norm();
        let Ok((col, row)) = bearing_to_pixel_index(&cam, dims) else {
            continue;
        };
        projected.push((k, row * dims.width + col, d));
    }
    let labels = match reference {
        Some(r) => r.clone(),
        None => {
            let mut nearest = LabelImage::filled(dims, VOID);
            let mut best = vec![f64::INFINITY; n];
            for &(k, i, d) in &projected {
                if d < best[i] {
                    best[i] = d;
                    nearest.set(i, cloud[k].1);
                }
            }
            nearest
        }
    };
    for &(k, i, d) in &projected {
        if cloud[k].1 == labels.get(i) && d < depth[i] {
            depth[i] = d;
            chosen[i] = Some(k);
        }
    }
    let mut coords = SceneCoordinateImage::invalid(dims);
    for (i, c) in chosen.iter().enumerate() {
        if let Some(k) = c {
            coords.set(i, Some(cloud[*k].0));
        }
    }
    RenderOutput { coords, labels }
}

/// Regular samples on every building's walls and roof, edges included.
pub fn sample_surface_cloud(scene: &CityScene, spacing: f64) -> Vec<LabeledPoint> {
    let mut out = Vec::new();
    for b in &scene.buildings {
        let h = b.half_extents;
        let steps = |len: f64| ((2.0 * len / spacing).ceil() as usize).max(1);
        let line = |len: f64| {
            let n = steps(len);
            (0..=n).map(move |k| -len + 2.0 * len * k as f64 / n as f64)
        };
        let mut push = |local: Vec3| out.push((b.to_world(&local), b.instance_label));
        for y in line(h.y) {
            for x in line(h.x) {
                push(Vec3::new(x, y, -h.z));
                push(Vec3::new(x, y, h.z));
            }
            for z in line(h.z) {
                push(Vec3::new(-h.x, y, z));
                push(Vec3::new(h.x, y, z));
            }
        }
        for x in line(h.x) {
            for z in line(h.z) {
                push(Vec3::new(x, h.y, z));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{level_camera_rotation, Bearing};
    use crate::labels::is_building;
    use crate::pnp::{angular_residual, Correspondence};
    use crate::scene_sim::{generate_city, CityPreset};

    fn dims() -> ImageDims {
        ImageDims::new(128, 64).unwrap()
    }

    #[test]
    fn empty_scene_is_ground_and_sky() {
        let scene = CityScene::empty(0);
        let pose = Pose::from_center(level_camera_rotation(0.3, 0.0, 0.0), Vec3::new(0.0, 10.0, 0.0));
        let out = raycast_render(&scene, &pose, dims());
        let d = dims();
        for row in 0..d.height {
            for col in 0..d.width {
                let i = row * d.width + col;
                if row < d.height / 2 {
                    assert_eq!(out.labels.get(i), SKY);
                    assert!(out.coords.get(i).is_none());
                } else {
                    assert_eq!(out.labels.get(i), ROAD);
                    assert!(out.coords.get(i).unwrap().y.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unit_box_dead_ahead() {
        let mut scene = CityScene::empty(0);
        scene.buildings.push(Cuboid {
            center: Vec3::new(0.0, 0.0, 5.0),
            half_extents: Vec3::repeat(0.5),
            yaw: 0.0,
            instance_label: 1000,
        });
        let d = ImageDims::new(512, 256).unwrap();
        let out = raycast_render(&scene, &Pose::identity(), d);
        // the forward axis sits on the corner shared by the four central pixels
        let b = Bearing::new(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let (col, row) = bearing_to_pixel_index(b.as_vec(), d).unwrap();
        let i = row * d.width + col;
        assert_eq!(out.labels.get(i), 1000);
        let hit = out.coords.get(i).unwrap();
        assert!((hit.z - 4.5).abs() < 1e-9);
        // analytic ray-box oracle for this pixel's ray
        let ray = pixel_to_bearing(PixelCoord { u: col as f64, v: row as f64 }, d).unwrap();
        let expected = ray.as_vec() * (4.5 / ray.as_vec().z);
        assert!((hit - expected).norm() < 1e-9);
    }

    #[test]
    fn rendered_points_lie_on_surfaces_and_rays() {
        let p = CityPreset::small();
        let scene = generate_city(p.buildings, p.grid, p.sizes, 7).unwrap();
        let pose = Pose::from_center(level_camera_rotation(1.0, 0.02, 0.0), Vec3::new(6.0, 2.0, 150.0));
        let out = raycast_render(&scene, &pose, dims());
        let bearings = crate::losses::pixel_bearings(dims());
        let mut buildings = 0;
        for (i, bearing) in bearings.iter().enumerate() {
            let Some(s) = out.coords.get(i) else { continue };
            let label = out.labels.get(i);
            let dist = if is_building(label) {
                buildings += 1;
                scene.building(label).unwrap().surface_distance(&s)
            } else {
                s.y.abs()
            };
            assert!(dist < 1e-7, "{dist}");
            let r = angular_residual(&pose, &Correspondence::new(*bearing, s));
            assert!(r < 1e-9, "{r}");
        }
        assert!(buildings > 100);
    }

    #[test]
    fn reference_label_beats_depth() {
        let pose = Pose::identity();
        let d = ImageDims::new(16, 8).unwrap();
        let near = (Vec3::new(0.0, 0.0, 5.0), 1000);
        let far = (Vec3::new(0.0, 0.0, 9.0), 1001);
        let (col, row) = bearing_to_pixel_index(&Vec3::z(), d).unwrap();
        let i = row * d.width + col;
        let mut reference = LabelImage::filled(d, VOID);
        reference.set(i, 1001);
        let out = project_pointcloud(&[near, far], &pose, d, Some(&reference));
        assert_eq!(out.coords.get(i), Some(far.0));
        let free = project_pointcloud(&[near, far], &pose, d, None);
        assert_eq!(free.coords.get(i), Some(near.0));
        assert_eq!(free.labels.get(i), 1000);
    }

    #[test]
    fn one_point_per_pixel_is_identity_selection() {
        let d = ImageDims::new(16, 8).unwrap();
        let pose = Pose::identity();
        let bearings = crate::losses::pixel_bearings(d);
        let cloud: Vec<LabeledPoint> = bearings
            .iter()
            .enumerate()
            .map(|(i, b)| (b.as_vec() * (3.0 + i as f64 * 0.1), 1000 + i as u32))
            .collect();
        let out = project_pointcloud(&cloud, &pose, d, None);
        for (i, (p, l)) in cloud.iter().enumerate() {
            assert!((out.coords.get(i).unwrap() - p).norm() < 1e-12);
            assert_eq!(out.labels.get(i), *l);
        }
    }

    #[test]
    fn surface_samples_include_edges() {
        let mut scene = CityScene::empty(0);
        scene.buildings.push(Cuboid {
            center: Vec3::new(0.0, 2.0, 0.0),
            half_extents: Vec3::new(3.0, 2.0, 1.0),
            yaw: 0.4,
            instance_label: 1000,
        });
        let cloud = sample_surface_cloud(&scene, 0.5);
        let b = &scene.buildings[0];
        assert!(cloud.iter().all(|(p, _)| b.surface_distance(p) < 1e-9));
        assert!(cloud.iter().any(|(p, _)| p.y.abs() < 1e-12));
        assert!(cloud.iter().any(|(p, _)| (p.y - 4.0).abs() < 1e-12));
    }
}
