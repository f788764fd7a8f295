use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Aabb, SceneError};
use crate::geometry::Vec3;
use crate::image::{LabelImage, SceneCoordinateImage};
use crate::instance_map::InstanceMap;
use crate::labels::{is_building, LabelId};

/// Surrogate for network prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Isotropic Gaussian sigma on scene coordinates, meters.
    pub coord_sigma: f64,
    /// Fraction of valid pixels replaced by uniform samples in the scene volume.
    pub outlier_rate: f64,
    /// Fraction of building pixels reassigned to another instance.
    pub label_flip_rate: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            coord_sigma: 0.0,
            outlier_rate: 0.0,
            label_flip_rate: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        if !(self.coord_sigma >= 0.0 && self.coord_sigma.is_finite()) {
            return Err(SceneError::Parameter("coord_sigma must be >= 0".into()));
        }
        if !rate(self.outlier_rate) || !rate(self.label_flip_rate) {
            return Err(SceneError::Parameter("rates must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Simulated network output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub coords: SceneCoordinateImage,
    pub labels: LabelImage,
    /// Whitened coordinates under the predicted label; invalid where the
    /// predicted label has no transform.
    pub local: SceneCoordinateImage,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Corrupt ground truth with the noise model.
///
/// Each pixel draws from its own ChaCha stream keyed by `(nm.seed, frame_key)`
/// and the pixel index, so results do not depend on traversal order.
/// Flipped pixels keep their local coordinates under the true label and are
/// unwhitened with the wrong instance's transform.
pub fn simulate_predictions(
    gt_coords: &SceneCoordinateImage,
    gt_labels: &LabelImage,
    nm: &NoiseModel,
    map: &InstanceMap,
    volume: &Aabb,
    frame_key: u64,
) -> Result<Prediction, SceneError> {
    nm.validate()?;
    let instances: Vec<LabelId> = map.labels().collect();
    let base = mix(nm.seed, frame_key);
    let dims = gt_coords.dims();
    let mut coords = gt_coords.clone();
    let mut labels = gt_labels.clone();
    let mut local = SceneCoordinateImage::invalid(dims);
    for i in 0..dims.pixel_count() {
        let Some(gt) = gt_coords.get(i) else { continue };
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(i as u64);
        let mut s = if rng.random::<f64>() < nm.outlier_rate {
            Vec3::new(
                rng.random_range(volume.min.x..=volume.max.x),
                rng.random_range(volume.min.y..=volume.max.y),
                rng.random_range(volume.min.z..=volume.max.z),
            )
        } else {
            let n: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            gt + Vec3::from(n) * nm.coord_sigma
        };
        let true_label = gt_labels.get(i);
        let mut label = true_label;
        if is_building(true_label) && instances.len() > 1 && rng.random::<f64>() < nm.label_flip_rate {
            let mut k = rng.random_range(0..instances.len() - 1);
            if let Some(pos) = instances.iter().position(|&l| l == true_label) {
                if k >= pos {
                    k += 1;
                }
            }
            let wrong = instances[k];
            if let (Some(from), Some(to)) = (map.get(true_label), map.get(wrong)) {
                s = to.unwhiten(&from.whiten(&s));
                label = wrong;
            }
        }
        coords.set(i, Some(s));
        labels.set(i, label);
        if let Some(t) = map.get(label) {
            local.set(i, Some(t.whiten(&s)));
        }
    }
    Ok(Prediction { coords, labels, local })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageDims;
    use crate::instance_map::fit_whitening;
    use crate::labels::ROAD;

    fn fixture(dims: ImageDims) -> (SceneCoordinateImage, LabelImage, InstanceMap) {
        let mut map = InstanceMap::new(5);
        let mut coords = SceneCoordinateImage::invalid(dims);
        let mut labels = LabelImage::filled(dims, ROAD);
        for (k, label) in [1000u32, 1001].into_iter().enumerate() {
            let off = Vec3::new(40.0 * k as f64, 5.0, 20.0);
            let pts: Vec<Vec3> = (0..50)
                .map(|j| off + Vec3::new((j % 5) as f64 * 2.0, (j / 5) as f64, (j % 3) as f64))
                .collect();
            map.insert(fit_whitening(&pts, label).unwrap()).unwrap();
        }
        for i in 0..dims.pixel_count() {
            let label = if i % 3 == 0 { ROAD } else { 1000 + (i % 2) as u32 };
            labels.set(i, label);
            coords.set(i, Some(Vec3::new(i as f64 * 0.01, 3.0, 20.0 + (i % 7) as f64)));
        }
        (coords, labels, map)
    }

    fn volume() -> Aabb {
        Aabb {
            min: Vec3::new(-10.0, 0.0, -10.0),
            max: Vec3::new(100.0, 40.0, 100.0),
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let d = ImageDims::new(64, 32).unwrap();
        let (coords, labels, map) = fixture(d);
        let p = simulate_predictions(&coords, &labels, &NoiseModel::default(), &map, &volume(), 3).unwrap();
        assert_eq!(p.coords, coords);
        assert_eq!(p.labels, labels);
        for i in 0..d.pixel_count() {
            if let Some(t) = map.get(labels.get(i)) {
                assert!((t.unwhiten(&p.local.get(i).unwrap()) - coords.get(i).unwrap()).norm() < 1e-9);
            } else {
                assert!(p.local.get(i).is_none());
            }
        }
    }

    #[test]
    fn flip_rate_matches_bernoulli_count() {
        let d = ImageDims::new(256, 128).unwrap();
        let (coords, labels, map) = fixture(d);
        let nm = NoiseModel {
            label_flip_rate: 0.1,
            seed: 5,
            ..Default::default()
        };
        let p = simulate_predictions(&coords, &labels, &nm, &map, &volume(), 0).unwrap();
        let mut buildings = 0;
        let mut flipped = 0;
        for i in 0..d.pixel_count() {
            if is_building(labels.get(i)) {
                buildings += 1;
                if p.labels.get(i) != labels.get(i) {
                    flipped += 1;
                    let (from, to) = (map.get(labels.get(i)).unwrap(), map.get(p.labels.get(i)).unwrap());
                    let c = from.whiten(&coords.get(i).unwrap());
                    assert!((to.unwhiten(&c) - p.coords.get(i).unwrap()).norm() < 1e-9);
                }
            } else {
                assert_eq!(p.labels.get(i), labels.get(i));
            }
        }
        let frac = flipped as f64 / buildings as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn outliers_land_in_volume_and_seeding_is_deterministic() {
        let d = ImageDims::new(64, 32).unwrap();
        let (coords, labels, map) = fixture(d);
        let nm = NoiseModel {
            outlier_rate: 1.0,
            seed: 1,
            ..Default::default()
        };
        let a = simulate_predictions(&coords, &labels, &nm, &map, &volume(), 9).unwrap();
        let b = simulate_predictions(&coords, &labels, &nm, &map, &volume(), 9).unwrap();
        assert_eq!(a, b);
        let v = volume();
        for i in 0..d.pixel_count() {
            let s = a.coords.get(i).unwrap();
            assert!((0..3).all(|k| s[k] >= v.min[k] && s[k] <= v.max[k]));
        }
        let c = simulate_predictions(&coords, &labels, &nm, &map, &volume(), 10).unwrap();
        assert_ne!(a.coords, c.coords);
    }

    #[test]
    fn rejects_bad_rates() {
        let d = ImageDims::new(8, 4).unwrap();
        let (coords, labels, map) = fixture(d);
        let nm = NoiseModel {
            outlier_rate: 1.5,
            ..Default::default()
        };
        assert!(simulate_predictions(&coords, &labels, &nm, &map, &volume(), 0).is_err());
    }
}
