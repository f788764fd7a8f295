use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use super::render::{raycast_render, LabeledPoint, RenderOutput};
use super::{canonical_yaw, snap, CityScene, Cuboid, SceneError, POSITION_QUANTUM, YAW_QUANTUM};
use crate::geometry::{ImageDims, Pose, Vec3};
use crate::labels::LabelId;

/// Share of points ignored at each end of a bound, so stray samples do not
/// inflate the box.
const TRIM: f64 = 0.01;
/// Relative eigenvalue gap below which the footprint has no principal axis.
const ISOTROPY_TOL: f64 = 1e-9;

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Yaw of the dominant horizontal axis, or `None` when the footprint is
/// isotropic or degenerate.
fn principal_yaw(points: &[Vec3]) -> Option<f64> {
    let n = points.len() as f64;
    let (mx, mz) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.z));
    let (mx, mz) = (mx / n, mz / n);
    let (mut sxx, mut sxz, mut szz) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dz) = (p.x - mx, p.z - mz);
        sxx += dx * dx;
        sxz += dx * dz;
        szz += dz * dz;
    }
    let trace = sxx + szz;
    let gap = ((sxx - szz).powi(2) + 4.0 * sxz * sxz).sqrt();
    if !(trace > 0.0) || gap <= ISOTROPY_TOL * trace {
        return None;
    }
    // major axis direction (ex, ez) of the 2x2 scatter matrix
    let theta = 0.5 * (2.0 * sxz).atan2(sxx - szz);
    let (ez, ex) = theta.sin_cos();
    Some((-ez).atan2(ex))
}

/// Fit a yawed box to the points of one building.
///
/// The yaw follows the principal axis of the ground-plane projection; the
/// box spans the 1% to 99% quantiles of the points in that frame, with its
/// bottom clamped to the ground. Output lies on the scene quantisation grid
/// with `half_extents.x >= half_extents.z`.
pub fn cuboid_approximation(points: &[Vec3], label: LabelId) -> Result<Cuboid, SceneError> {
    if points.len() < 4 {
        return Err(SceneError::TooFewPoints {
            label,
            count: points.len(),
        });
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(SceneError::Parameter(format!("instance {label}: non-finite point")));
    }
    let yaw = principal_yaw(points).map_or(0.0, |y| snap(canonical_yaw(y), YAW_QUANTUM));
    let fit = |yaw: f64| {
        let (s, c) = yaw.sin_cos();
        let mut xs: Vec<f64> = points.iter().map(|p| c * p.x - s * p.z).collect();
        let mut zs: Vec<f64> = points.iter().map(|p| s * p.x + c * p.z).collect();
        xs.sort_by(f64::total_cmp);
        zs.sort_by(f64::total_cmp);
        let (x0, x1) = (quantile(&xs, TRIM), quantile(&xs, 1.0 - TRIM));
        let (z0, z1) = (quantile(&zs, TRIM), quantile(&zs, 1.0 - TRIM));
        (x0, x1, z0, z1)
    };
    let (mut yaw, (mut x0, mut x1, mut z0, mut z1)) = (yaw, fit(yaw));
    if x1 - x0 < z1 - z0 {
        yaw = snap(canonical_yaw(yaw + FRAC_PI_2), YAW_QUANTUM);
        (x0, x1, z0, z1) = fit(yaw);
    }
    let mut ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    ys.sort_by(f64::total_cmp);
    let bottom = ys[0].max(0.0);
    let top = quantile(&ys, 1.0 - TRIM);
    if !(top > bottom) || !(x1 > x0) || !(z1 > z0) {
        return Err(SceneError::Parameter(format!("instance {label}: flat point set")));
    }
    let (s, c) = yaw.sin_cos();
    let (lx, lz) = ((x0 + x1) / 2.0, (z0 + z1) / 2.0);
    let half_y = snap((top - bottom) / 2.0, POSITION_QUANTUM);
    Ok(Cuboid {
        center: Vec3::new(
            snap(c * lx + s * lz, POSITION_QUANTUM),
            half_y,
            snap(-s * lx + c * lz, POSITION_QUANTUM),
        ),
        half_extents: Vec3::new(
            snap((x1 - x0) / 2.0, POSITION_QUANTUM),
            half_y,
            snap((z1 - z0) / 2.0, POSITION_QUANTUM),
        ),
        yaw,
        instance_label: label,
    })
}

/// Replace every building instance in `cloud` by its fitted cuboid.
pub fn approximate_scene(cloud: &[LabeledPoint], template: &CityScene) -> Result<CityScene, SceneError> {
    let mut groups: BTreeMap<LabelId, Vec<Vec3>> = BTreeMap::new();
    for (p, label) in cloud {
        if crate::labels::is_building(*label) {
            groups.entry(*label).or_default().push(*p);
        }
    }
    let buildings = groups
        .into_iter()
        .map(|(label, pts)| cuboid_approximation(&pts, label))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CityScene {
        buildings,
        road_segments: template.road_segments,
        seed: template.seed,
        grid: template.grid,
    })
}

/// Ground truth for training against an approximate map.
pub fn render_approximate_gt(approx: &CityScene, pose: &Pose, dims: ImageDims) -> RenderOutput {
    raycast_render(approx, pose, dims)
}
