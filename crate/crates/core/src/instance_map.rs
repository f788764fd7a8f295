//! Per-instance PCA whitening.
//!
//! Every building instance carries an affine map between world scene
//! coordinates `S` and instance-local whitened coordinates `C`:
//! `S = W * C + M`, where `M` is the instance mean and `W = U * sqrt(Λ + ε)`
//! comes from the eigendecomposition `U Λ U^T` of the population covariance.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Mat3, Vec3};
use crate::labels::{is_building, LabelId};
use crate::numeric::sorted_sum;

/// Eigenvalue floor (m^2) keeping planar instances invertible.
pub const EIGEN_FLOOR: f64 = 1e-8;

/// Fewest points a transform can be fitted from.
pub const MIN_INSTANCE_POINTS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WhiteningError {
    #[error("instance {label} has {count} points, need at least {MIN_INSTANCE_POINTS}")]
    DegenerateInstance { label: LabelId, count: usize },
    #[error("instance {label} contains non-finite coordinates")]
    NonFinite { label: LabelId },
    #[error("unwhitening matrix for instance {label} is singular")]
    Singular { label: LabelId },
    #[error("duplicate instance label {0}")]
    DuplicateLabel(LabelId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub label: LabelId,
    pub mean: Vec3,
    pub unwhiten_matrix: Mat3,
    pub whiten_matrix: Mat3,
    pub point_count: usize,
}

impl WhiteningTransform {
    /// Rebuild a transform from a stored unwhitening matrix.
    pub fn from_parts(
        label: LabelId,
        mean: Vec3,
        unwhiten_matrix: Mat3,
        point_count: usize,
    ) -> Result<Self, WhiteningError> {
        let whiten_matrix = unwhiten_matrix
            .try_inverse()
            .ok_or(WhiteningError::Singular { label })?;
        Ok(Self {
            label,
            mean,
            unwhiten_matrix,
            whiten_matrix,
            point_count,
        })
    }

    pub fn unwhiten(&self, c: &Vec3) -> Vec3 {
        self.unwhiten_matrix * c + self.mean
    }

    pub fn whiten(&self, s: &Vec3) -> Vec3 {
        self.whiten_matrix * (s - self.mean)
    }
}

/// Fit a PCA whitening transform to one instance's points.
///
/// Means and covariance entries are accumulated with sorted compensated
/// summation, so any permutation of `points` yields the same transform.
pub fn fit_whitening(points: &[Vec3], label: LabelId) -> Result<WhiteningTransform, WhiteningError> {
    let n = points.len();
    if n < MIN_INSTANCE_POINTS {
        return Err(WhiteningError::DegenerateInstance { label, count: n });
    }
    if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(WhiteningError::NonFinite { label });
    }
    let nf = n as f64;
    let mut terms = vec![0.0; n];
    let mut mean = Vec3::zeros();
    for axis in 0..3 {
        for (t, p) in terms.iter_mut().zip(points) {
            *t = p[axis];
        }
        mean[axis] = sorted_sum(&mut terms) / nf;
    }
    let mut cov = Mat3::zeros();
    for i in 0..3 {
        for j in i..3 {
            for (t, p) in terms.iter_mut().zip(points) {
                *t = (p[i] - mean[i]) * (p[j] - mean[j]);
            }
            let v = sorted_sum(&mut terms) / nf;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Mat3::zeros();
    let mut scales = Vec3::zeros();
    for (col, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let pivot = (0..3)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        if v[pivot] < 0.0 {
            v = -v;
        }
        basis.set_column(col, &v);
        scales[col] = (eig.eigenvalues[k].max(0.0) + EIGEN_FLOOR).sqrt();
    }
    if basis.determinant() < 0.0 {
        let last = -basis.column(2).into_owned();
        basis.set_column(2, &last);
    }
    let unwhiten_matrix = basis * Mat3::from_diagonal(&scales);
    let whiten_matrix = Mat3::from_diagonal(&scales.map(|s| 1.0 / s)) * basis.transpose();
    Ok(WhiteningTransform {
        label,
        mean,
        unwhiten_matrix,
        whiten_matrix,
        point_count: n,
    })
}

/// Whitening transforms keyed by building instance label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceMap {
    transforms: BTreeMap<LabelId, WhiteningTransform>,
    /// Total number of panoptic labels (stuff classes plus instances).
    pub label_count: usize,
}

/// Result of [`build_instance_map`]: the map plus instances that were too small.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapBuild {
    pub map: InstanceMap,
    pub skipped: Vec<(LabelId, usize)>,
}

impl InstanceMap {
    pub fn new(label_count: usize) -> Self {
        Self {
            transforms: BTreeMap::new(),
            label_count,
        }
    }

    pub fn insert(&mut self, t: WhiteningTransform) -> Result<(), WhiteningError> {
        if self.transforms.contains_key(&t.label) {
            return Err(WhiteningError::DuplicateLabel(t.label));
        }
        self.transforms.insert(t.label, t);
        Ok(())
    }

    pub fn get(&self, label: LabelId) -> Option<&WhiteningTransform> {
        self.transforms.get(&label)
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.transforms.keys().copied()
    }

    pub fn transforms(&self) -> impl Iterator<Item = &WhiteningTransform> {
        self.transforms.values()
    }

    pub fn to_file(&self) -> InstanceMapFile {
        InstanceMapFile {
            labels: self
                .transforms
                .values()
                .map(|t| MapEntry {
                    id: t.label,
                    mean: [t.mean.x, t.mean.y, t.mean.z],
                    w: row_major(&t.unwhiten_matrix),
                    count: t.point_count,
                })
                .collect(),
            label_count: self.label_count,
        }
    }

    pub fn from_file(file: &InstanceMapFile) -> Result<Self, WhiteningError> {
        let mut map = InstanceMap::new(file.label_count);
        for e in &file.labels {
            let w = Mat3::from_row_slice(&e.w);
            let t = WhiteningTransform::from_parts(e.id, Vec3::from(e.mean), w, e.count)?;
            map.insert(t)?;
        }
        Ok(map)
    }
}

fn row_major(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = m[(i, j)];
        }
    }
    out
}

/// JSON layout of a stored instance map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMapFile {
    pub labels: Vec<MapEntry>,
    pub label_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub id: LabelId,
    pub mean: [f64; 3],
    #[serde(rename = "W")]
    pub w: [f64; 9],
    pub count: usize,
}

/// Group a labeled cloud by building instance and fit one transform per label.
///
/// Non-building labels are ignored. `label_count` is the number of stuff
/// classes plus the number of fitted instances.
pub fn build_instance_map<'a, I>(cloud: I) -> MapBuild
where
    I: IntoIterator<Item = (&'a Vec3, LabelId)>,
{
    let mut groups: BTreeMap<LabelId, Vec<Vec3>> = BTreeMap::new();
    for (p, label) in cloud {
        if is_building(label) {
            groups.entry(label).or_default().push(*p);
        }
    }
    let mut map = InstanceMap::new(crate::labels::STUFF_CLASS_COUNT);
    let mut skipped = Vec::new();
    for (label, pts) in groups {
        match fit_whitening(&pts, label) {
            Ok(t) => {
                map.transforms.insert(label, t);
            }
            Err(_) => skipped.push((label, pts.len())),
        }
    }
    map.label_count = crate::labels::STUFF_CLASS_COUNT + map.transforms.len();
    MapBuild { map, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cube_corners(center: Vec3) -> Vec<Vec3> {
        let mut v = Vec::new();
        for &x in &[-0.5, 0.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.5, 0.5] {
                    v.push(center + Vec3::new(x, y, z));
                }
            }
        }
        v
    }

    // brute-force population statistics, independent of the fitting path
    fn stats(points: &[Vec3]) -> (Vec3, Mat3) {
        let n = points.len() as f64;
        let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
        let mut cov = Mat3::zeros();
        for p in points {
            for i in 0..3 {
                for j in 0..3 {
                    cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
                }
            }
        }
        (mean, cov)
    }

    fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, scale: Vec3, offset: Vec3) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                let z: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                offset + Vec3::new(z[0] * scale.x, z[1] * scale.y + 0.3 * z[0], z[2] * scale.z)
            })
            .collect()
    }

    #[test]
    fn cube_corners_whiten_to_identity() {
        let c = Vec3::new(10.0, 0.0, 5.0);
        let pts = cube_corners(c);
        let t = fit_whitening(&pts, 1000).unwrap();
        assert!((t.mean - c).norm() < 1e-12);
        let white: Vec<Vec3> = pts.iter().map(|p| t.whiten(p)).collect();
        let (m, cov) = stats(&white);
        assert!(m.norm() < 1e-8);
        assert!((cov - Mat3::identity()).amax() < 1e-6);
        assert!((t.unwhiten(&white[0]) - pts[0]).norm() < 1e-9);
        assert!((t.unwhiten_matrix * t.whiten_matrix - Mat3::identity()).amax() < 1e-8);
    }

    #[test]
    fn mean_is_recovered_at_zero() {
        let pts = cube_corners(Vec3::new(-3.0, 2.0, 1.0));
        let t = fit_whitening(&pts, 1001).unwrap();
        assert_eq!(t.unwhiten(&Vec3::zeros()), t.mean);
        assert!(t.whiten(&t.mean).norm() < 1e-15);
    }

    #[test]
    fn standard_cloud_gives_near_identity_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..20000)
            .map(|_| {
                Vec3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                )
            })
            .collect();
        let t = fit_whitening(&pts, 1000).unwrap();
        let (_, cov) = stats(&pts);
        let wwt = t.unwhiten_matrix * t.unwhiten_matrix.transpose();
        assert!((wwt - cov).amax() < 1e-6);
    }

    #[test]
    fn coplanar_facade_stays_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // facade in the plane z = 7
        let pts: Vec<Vec3> = (0..400)
            .map(|_| Vec3::new(rng.random_range(0.0..20.0), rng.random_range(0.0..30.0), 7.0))
            .collect();
        let t = fit_whitening(&pts, 1002).unwrap();
        for p in &pts {
            assert!((t.unwhiten(&t.whiten(p)) - p).norm() < 1e-6);
        }
        assert!((t.unwhiten_matrix * t.whiten_matrix - Mat3::identity()).amax() < 1e-8);
    }

    #[test]
    fn fitted_set_is_white() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = gaussian_cloud(&mut rng, 5000, Vec3::new(8.0, 3.0, 0.5), Vec3::new(200.0, 10.0, -40.0));
        let t = fit_whitening(&pts, 1000).unwrap();
        let white: Vec<Vec3> = pts.iter().map(|p| t.whiten(p)).collect();
        let (m, cov) = stats(&white);
        assert!(m.norm() < 1e-8);
        assert!((cov - Mat3::identity()).amax() < 1e-6);
    }

    #[test]
    fn sign_and_orientation_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = gaussian_cloud(&mut rng, 500, Vec3::new(5.0, 2.0, 1.0), Vec3::zeros());
        let t = fit_whitening(&pts, 1000).unwrap();
        let u = t.unwhiten_matrix;
        let scales: Vec<f64> = (0..3).map(|j| u.column(j).norm()).collect();
        assert!(scales[0] >= scales[1] && scales[1] >= scales[2]);
        let basis = Mat3::from_columns(&[
            u.column(0) / scales[0],
            u.column(1) / scales[1],
            u.column(2) / scales[2],
        ]);
        assert!((basis.determinant() - 1.0).abs() < 1e-9);
        for j in 0..2 {
            let col = basis.column(j);
            let big = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(big > 0.0);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = vec![Vec3::zeros(); 3];
        assert_eq!(
            fit_whitening(&pts, 1005),
            Err(WhiteningError::DegenerateInstance { label: 1005, count: 3 })
        );
    }

    #[test]
    fn translation_equivariance_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = gaussian_cloud(&mut rng, 777, Vec3::new(6.0, 4.0, 2.0), Vec3::new(1.0, 2.0, 3.0));
        let t = fit_whitening(&pts, 1000).unwrap();
        let d = Vec3::new(120.0, -3.5, 48.0);
        let moved: Vec<Vec3> = pts.iter().map(|p| p + d).collect();
        let tm = fit_whitening(&moved, 1000).unwrap();
        assert!((tm.mean - t.mean - d).norm() < 1e-8);
        assert!((tm.unwhiten_matrix - t.unwhiten_matrix).amax() < 1e-8);

        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.swap(3, 400);
        let ts = fit_whitening(&shuffled, 1000).unwrap();
        assert_eq!(ts, t);
    }

    #[test]
    fn build_map_groups_by_label() {
        let a = cube_corners(Vec3::new(0.0, 0.5, 0.0));
        let b = cube_corners(Vec3::new(20.0, 0.5, 0.0));
        let road = vec![Vec3::new(1.0, 0.0, 1.0); 10];
        let cloud: Vec<(&Vec3, LabelId)> = a
            .iter()
            .map(|p| (p, 1000))
            .chain(b.iter().map(|p| (p, 1001)))
            .chain(road.iter().map(|p| (p, crate::labels::ROAD)))
            .chain(std::iter::once((&a[0], 1002)))
            .collect();
        let built = build_instance_map(cloud);
        assert_eq!(built.map.len(), 2);
        assert_eq!(built.map.get(1000).unwrap().point_count, 8);
        assert_eq!(built.map.get(1001).unwrap().point_count, 8);
        assert!(built.map.get(crate::labels::ROAD).is_none());
        assert_eq!(built.skipped, vec![(1002, 1)]);
        assert_eq!(built.map.label_count, crate::labels::STUFF_CLASS_COUNT + 2);
    }

    #[test]
    fn empty_building_set_gives_empty_map() {
        let road = vec![Vec3::new(1.0, 0.0, 1.0); 10];
        let built = build_instance_map(road.iter().map(|p| (p, crate::labels::ROAD)));
        assert!(built.map.is_empty());
        assert!(built.skipped.is_empty());
    }

    #[test]
    fn duplicate_label_over_disjoint_sets_is_one_transform() {
        let a = cube_corners(Vec3::new(0.0, 0.5, 0.0));
        let b = cube_corners(Vec3::new(50.0, 0.5, 0.0));
        let built = build_instance_map(a.iter().chain(b.iter()).map(|p| (p, 1000)));
        assert_eq!(built.map.len(), 1);
        assert_eq!(built.map.get(1000).unwrap().point_count, 16);
    }

    #[test]
    fn file_round_trip() {
        let a = cube_corners(Vec3::new(0.0, 0.5, 0.0));
        let built = build_instance_map(a.iter().map(|p| (p, 1000)));
        let json = serde_json::to_string(&built.map.to_file()).unwrap();
        assert!(json.contains("\"W\""));
        let back: InstanceMapFile = serde_json::from_str(&json).unwrap();
        let map = InstanceMap::from_file(&back).unwrap();
        let (t0, t1) = (built.map.get(1000).unwrap(), map.get(1000).unwrap());
        assert_eq!(t0.unwhiten_matrix, t1.unwhiten_matrix);
        assert!((t0.whiten_matrix - t1.whiten_matrix).amax() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn whiten_unwhiten_round_trip(
            seed in 0u64..1000,
            cx in -1.0e3..1.0e3f64, cy in -1.0e3..1.0e3f64, cz in -1.0e3..1.0e3f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = gaussian_cloud(&mut rng, 64, Vec3::new(9.0, 5.0, 0.2), Vec3::new(cx, 0.0, cz));
            let t = fit_whitening(&pts, 1000).unwrap();
            let s = Vec3::new(cx, cy, cz) + Vec3::new(rng.random_range(-50.0..50.0), 1.0, 2.0);
            proptest::prop_assert!((t.unwhiten(&t.whiten(&s)) - s).norm() < 1e-9);
            let c = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            proptest::prop_assert!((t.whiten(&t.unwhiten(&c)) - c).norm() < 1e-9);
        }
    }
}
