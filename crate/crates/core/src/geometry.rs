//! Equirectangular camera model and rigid pose algebra.
//!
//! Camera frame: x right, y down, z forward. Longitude runs from -pi at the
//! left image edge to +pi at the right edge; latitude from +pi/2 at the top
//! row to -pi/2 at the bottom row. Pixels are sampled at their centers.
//!
//! A [`Pose`] stores `(R, T)` such that a world point `X` has camera-frame
//! coordinates `R^T X + T`; `R` maps camera axes into the world frame.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid image dimensions {width}x{height} (width must equal 2*height)")]
    InvalidDims { width: usize, height: usize },
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfRange {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("bearing vector has zero or non-finite length")]
    ZeroBearing,
    #[error("rotation matrix is not orthonormal with det +1")]
    InvalidRotation,
}

/// Equirectangular image size. Width is always twice the height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize) -> Result<Self, GeometryError> {
        if height == 0 || width != 2 * height {
            return Err(GeometryError::InvalidDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Continuous pixel coordinate of the center of pixel `(col, row)`.
    pub fn center_of(&self, col: usize, row: usize) -> PixelCoord {
        PixelCoord {
            u: col as f64,
            v: row as f64,
        }
    }
}

/// Continuous pixel coordinate. Integer values address pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

/// Unit direction in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing(Vec3);

impl Bearing {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: Vec3) -> Result<Self, GeometryError> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(GeometryError::ZeroBearing);
        }
        Ok(Self(v / n))
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    /// Angle in radians between two bearings, accurate near zero.
    pub fn angle_to(&self, other: &Bearing) -> f64 {
        angle_between(&self.0, &other.0)
    }
}

/// Unsigned angle between two nonzero vectors, radians.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

pub fn pixel_to_bearing(p: PixelCoord, dims: ImageDims) -> Result<Bearing, GeometryError> {
    let (w, h) = (dims.width as f64, dims.height as f64);
    // pixel centers lie at integer coordinates; the half-pixel offset below
    // maps them onto the angular cell centers
    if !(p.u >= -0.5 && p.u < w - 0.5 && p.v >= -0.5 && p.v < h - 0.5) {
        return Err(GeometryError::PixelOutOfRange {
            u: p.u,
            v: p.v,
            width: dims.width,
            height: dims.height,
        });
    }
    let lon = 2.0 * PI * (p.u + 0.5) / w - PI;
    let lat = FRAC_PI_2 - PI * (p.v + 0.5) / h;
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    Ok(Bearing(Vec3::new(cl * so, -sl, cl * co)))
}

pub fn bearing_to_pixel(b: &Vec3, dims: ImageDims) -> Result<PixelCoord, GeometryError> {
    let n = b.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(GeometryError::ZeroBearing);
    }
    let v = b / n;
    let lon = v.x.atan2(v.z);
    let lat = (-v.y).clamp(-1.0, 1.0).asin();
    let (w, h) = (dims.width as f64, dims.height as f64);
    let mut u = (lon + PI) * w / (2.0 * PI) - 0.5;
    let row = (FRAC_PI_2 - lat) * h / PI - 0.5;
    // longitude +pi wraps onto the left edge
    if u >= w - 0.5 {
        u -= w;
    }
    Ok(PixelCoord { u, v: row })
}

/// Integer pixel containing a bearing direction.
pub fn bearing_to_pixel_index(b: &Vec3, dims: ImageDims) -> Result<(usize, usize), GeometryError> {
    let p = bearing_to_pixel(b, dims)?;
    let col = ((p.u + 0.5).floor() as i64).rem_euclid(dims.width as i64) as usize;
    let row = ((p.v + 0.5).floor() as i64).clamp(0, dims.height as i64 - 1) as usize;
    Ok((col, row))
}

/// Rigid camera pose: camera-frame point = `rotation^T * world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates orthonormality and orientation of `rotation`.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).norm();
        if !(ortho < 1e-9 && (rotation.determinant() - 1.0).abs() < 1e-9) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Pose of a camera with orientation `rotation` (camera to world) centered at `center`.
    pub fn from_center(rotation: Mat3, center: Vec3) -> Self {
        Self {
            rotation,
            translation: -(rotation.transpose() * center),
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation * self.translation)
    }

    pub fn world_to_camera(&self, s: &Vec3) -> Vec3 {
        self.rotation.transpose() * s + self.translation
    }

    pub fn camera_to_world(&self, x: &Vec3) -> Vec3 {
        self.rotation * (x - self.translation)
    }

    /// Apply a rigid world transform `x -> g_rot * x + g_trans` to the scene.
    /// The returned pose observes the transformed scene exactly as `self`
    /// observed the original one.
    pub fn transform_world(&self, g_rot: &Mat3, g_trans: &Vec3) -> Pose {
        let rotation = g_rot * self.rotation;
        let translation = self.translation - rotation.transpose() * g_trans;
        Pose {
            rotation,
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.quaternion();
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        c
    }

    pub fn from_quaternion_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self, GeometryError> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(quat.norm() > 0.0 && quat.norm().is_finite()) {
            return Err(GeometryError::InvalidRotation);
        }
        let rot = UnitQuaternion::from_quaternion(quat).to_rotation_matrix();
        Ok(Self {
            rotation: *rot.matrix(),
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }
}

/// Camera orientation for a level camera heading `yaw` radians about the
/// world vertical (+y up), with optional pitch and roll in radians.
pub fn level_camera_rotation(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    // camera x right, y down, z forward; with yaw = 0 the camera looks along
    // world +z and its "down" axis is world -y
    let flip = Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
    let heading = Rotation3::from_axis_angle(&Vec3::y_axis(), yaw);
    let tilt = Rotation3::from_axis_angle(&Vec3::x_axis(), pitch)
        * Rotation3::from_axis_angle(&Vec3::z_axis(), roll);
    heading.matrix() * flip * tilt.matrix()
}

/// Camera-center distance (m) and rotation angle (deg) between two poses.
pub fn relative_pose_errors(a: &Pose, b: &Pose) -> (f64, f64) {
    let distance = (a.center() - b.center()).norm();
    let rel = a.rotation.transpose() * b.rotation;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    (distance, cos.acos().to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ImageDims {
        ImageDims::new(512, 256).unwrap()
    }

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-PI..PI);
        *Rotation3::from_scaled_axis(axis.normalize() * angle).matrix()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let t = Vec3::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
        );
        Pose::new(random_rotation(rng), t).unwrap()
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(ImageDims::new(512, 512).is_err());
        assert!(ImageDims::new(0, 0).is_err());
    }

    #[test]
    fn center_pixel_is_forward() {
        let b = pixel_to_bearing(PixelCoord { u: 255.5, v: 127.5 }, dims()).unwrap();
        assert_abs_diff_eq!(*b.as_vec(), Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn top_row_is_near_up_pole() {
        let b = pixel_to_bearing(PixelCoord { u: 0.0, v: 0.0 }, dims()).unwrap();
        let v = b.as_vec();
        assert!(v.y < -0.9999);
        assert_abs_diff_eq!(v.y, -(PI * 0.5 / 256.0).cos(), epsilon = 1e-12);
    }

    #[test]
    fn forward_and_right_axes_map_to_expected_pixels() {
        let p = bearing_to_pixel(&Vec3::z(), dims()).unwrap();
        assert_abs_diff_eq!(p.u, 255.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.v, 127.5, epsilon = 1e-12);
        let p = bearing_to_pixel(&Vec3::x(), dims()).unwrap();
        assert_abs_diff_eq!(p.u, 383.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.v, 127.5, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_and_zero_inputs_fail() {
        assert!(pixel_to_bearing(PixelCoord { u: 600.0, v: 1.0 }, dims()).is_err());
        assert!(pixel_to_bearing(PixelCoord { u: 1.0, v: -2.0 }, dims()).is_err());
        assert_eq!(
            bearing_to_pixel(&Vec3::zeros(), dims()),
            Err(GeometryError::ZeroBearing)
        );
    }

    #[test]
    fn exhaustive_round_trip_on_pixel_centers() {
        let d = dims();
        let mut worst: f64 = 0.0;
        for row in 0..d.height {
            for col in 0..d.width {
                let p = d.center_of(col, row);
                let b = pixel_to_bearing(p, d).unwrap();
                assert!((b.as_vec().norm() - 1.0).abs() < 1e-12);
                let q = bearing_to_pixel(b.as_vec(), d).unwrap();
                worst = worst.max((q.u - p.u).abs()).max((q.v - p.v).abs());
                assert_eq!(bearing_to_pixel_index(b.as_vec(), d).unwrap(), (col, row));
            }
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn random_bearing_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dims();
        for _ in 0..1000 {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let p = bearing_to_pixel(&v, d).unwrap();
            let back = pixel_to_bearing(p, d).unwrap();
            assert!((back.as_vec() - v).norm() < 1e-9);
        }
    }

    #[test]
    fn world_to_camera_fixtures() {
        let s = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().world_to_camera(&s), s);
        let p = Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, -5.0)).unwrap();
        assert_eq!(p.world_to_camera(&Vec3::new(0.0, 0.0, 5.0)), Vec3::zeros());
    }

    #[test]
    fn world_to_camera_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let pose = random_pose(&mut rng);
            let s = Vec3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            let mut m = Matrix4::identity();
            let rt = pose.rotation.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = rt[(i, j)];
                }
                m[(i, 3)] = pose.translation[i];
            }
            let h = m * nalgebra::Vector4::new(s.x, s.y, s.z, 1.0);
            let c = pose.world_to_camera(&s);
            for i in 0..3 {
                assert!((h[i] - c[i]).abs() < 1e-12 * (1.0 + h[i].abs()));
            }
            assert!(pose.world_to_camera(&pose.center()).norm() < 1e-9);
            assert!((pose.camera_to_world(&c) - s).norm() < 1e-9);
        }
    }

    #[test]
    fn relative_errors_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_pose(&mut rng);
        assert_eq!(relative_pose_errors(&a, &a).0, 0.0);
        assert!(relative_pose_errors(&a, &a).1 < 1e-6);

        let r10 = *Rotation3::from_axis_angle(&Vec3::y_axis(), 10f64.to_radians()).matrix();
        let b = Pose::from_center(a.rotation * r10, a.center());
        let (d, ang) = relative_pose_errors(&a, &b);
        assert!(d < 1e-9);
        assert!((ang - 10.0).abs() < 1e-9, "{ang}");
    }

    #[test]
    fn relative_errors_match_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let (_, ang) = relative_pose_errors(&a, &b);
            let qa = a.quaternion_wxyz();
            let qb = b.quaternion_wxyz();
            let dot: f64 = qa.iter().zip(qb.iter()).map(|(x, y)| x * y).sum();
            let oracle = (2.0 * dot.abs().min(1.0).acos()).to_degrees();
            assert!((ang - oracle).abs() < 1e-9, "{ang} vs {oracle}");
            let (d1, a1) = relative_pose_errors(&a, &b);
            let (d2, a2) = relative_pose_errors(&b, &a);
            assert!((d1 - d2).abs() < 1e-12 && (a1 - a2).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_composition_keeps_bearings() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pose = random_pose(&mut rng);
        let composed = pose.transform_world(&Mat3::identity(), &Vec3::zeros());
        for _ in 0..200 {
            let s = Vec3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            let a = pose.world_to_camera(&s);
            let b = composed.world_to_camera(&s);
            assert!(angle_between(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn quaternion_round_trip_keeps_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let q = p.quaternion_wxyz();
            assert!(q[0] >= 0.0);
            let t = [p.translation.x, p.translation.y, p.translation.z];
            let back = Pose::from_quaternion_wxyz(q, t).unwrap();
            assert!((back.rotation - p.rotation).norm() < 1e-12);
        }
    }

    #[test]
    fn level_camera_is_proper_rotation() {
        let r = level_camera_rotation(0.3, 0.01, -0.02);
        assert!(Pose::new(r, Vec3::zeros()).is_ok());
        let r0 = level_camera_rotation(0.0, 0.0, 0.0);
        // camera down axis points to world -y
        assert_abs_diff_eq!(r0 * Vec3::y(), -Vec3::y(), epsilon = 1e-15);
        assert_abs_diff_eq!(r0 * Vec3::z(), Vec3::z(), epsilon = 1e-15);
    }
}
