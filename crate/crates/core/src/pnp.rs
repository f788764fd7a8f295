//! Absolute pose for a central spherical camera.
//!
//! [`epnp_bearing`] is the EPnP control-point solver with the pinhole image
//! constraints replaced by tangent-plane constraints on each bearing vector:
//! for a bearing `v` with orthonormal tangents `e1, e2`, the camera-frame
//! point `sum_j alpha_ij c_j` must satisfy `<e_k, sum_j alpha_ij c_j> = 0`.
//! [`ransac_pnp`] wraps it in a deterministic consensus loop.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{angle_between, Bearing, Mat3, PixelCoord, Pose, Vec3};

/// Gauss-Newton iterations on the null-space coefficients.
const GAUSS_NEWTON_ITERS: usize = 10;
/// Smallest/largest eigenvalue ratio of the world spread below which the
/// points are treated as coplanar.
const PLANAR_RATIO: f64 = 1e-10;
/// Second/largest eigenvalue ratio below which the points are collinear.
const COLLINEAR_RATIO: f64 = 1e-12;
/// Camera-frame points closer than this to the center get a 180 deg residual.
const MIN_CAMERA_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone)]
pub enum PnpError {
    #[error("need at least {need} correspondences, got {got}")]
    TooFewCorrespondences { need: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
    #[error("no consensus: best hypothesis had {} inliers", .best.as_ref().map_or(0, |b| b.inlier_indices.len()))]
    NoConsensus { best: Option<Box<PoseEstimate>> },
}

/// Bearing observed at a pixel, paired with its predicted world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub bearing: Bearing,
    pub world_point: Vec3,
    pub pixel: Option<PixelCoord>,
}

impl Correspondence {
    pub fn new(bearing: Bearing, world_point: Vec3) -> Self {
        Self {
            bearing,
            world_point,
            pixel: None,
        }
    }
}

/// Angle in degrees between the observed bearing and the direction of the
/// world point seen from `pose`.
pub fn angular_residual(pose: &Pose, c: &Correspondence) -> f64 {
    let p = pose.world_to_camera(&c.world_point);
    if !(p.norm() >= MIN_CAMERA_DEPTH) {
        return 180.0;
    }
    angle_between(c.bearing.as_vec(), &p).to_degrees()
}

fn tangent_basis(v: &Vec3) -> (Vec3, Vec3) {
    let helper = if v.x.abs() < 0.6 { Vec3::x() } else { Vec3::y() };
    let e1 = v.cross(&helper).normalize();
    let e2 = v.cross(&e1);
    (e1, e2)
}

/// Closed-form rigid alignment: returns `(R, t)` minimizing
/// `sum |R * src_i + t - dst_i|^2` with `det R = +1`.
pub fn rigid_align(src: &[Vec3], dst: &[Vec3]) -> (Mat3, Vec3) {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fixed = u;
        let last = -fixed.column(2).into_owned();
        fixed.set_column(2, &last);
        r = fixed * v_t;
    }
    (r, cd - r * cs)
}

struct ControlFrame {
    world: Vec<Vec3>,
    alphas: Vec<[f64; 4]>,
}

impl ControlFrame {
    fn count(&self) -> usize {
        self.world.len()
    }
}

fn control_frame(points: &[Vec3]) -> Result<ControlFrame, PnpError> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    if !(lambda[0] > 0.0) || lambda[1] < COLLINEAR_RATIO * lambda[0] {
        return Err(PnpError::Degenerate("world points are collinear or coincident"));
    }
    let dims = if lambda[2] < PLANAR_RATIO * lambda[0] { 2 } else { 3 };
    let mut world = vec![centroid];
    let mut axes = Vec::with_capacity(dims);
    for k in 0..dims {
        let axis = eig.eigenvectors.column(order[k]).into_owned();
        let scale = lambda[k].sqrt();
        world.push(centroid + axis * scale);
        axes.push(axis / scale);
    }
    let alphas = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            let mut a = [0.0; 4];
            for k in 0..dims {
                a[k + 1] = axes[k].dot(&d);
            }
            a[0] = 1.0 - a[1..=dims].iter().sum::<f64>();
            a
        })
        .collect();
    Ok(ControlFrame { world, alphas })
}

/// Squared inter-distance equations between control points expressed in the
/// null-space coefficients: `|sum_k beta_k d_pk|^2 = rho_p` for each pair p.
struct DistanceSystem {
    /// `dots[p][k][l] = d_pk . d_pl`
    dots: Vec<[[f64; 4]; 4]>,
    rho: Vec<f64>,
    dim: usize,
}

impl DistanceSystem {
    fn new(frame: &ControlFrame, null: &[DVector<f64>], dim: usize) -> Self {
        let m = frame.count();
        let mut dots = Vec::new();
        let mut rho = Vec::new();
        for a in 0..m {
            for b in (a + 1)..m {
                let diffs: Vec<Vec3> = null[..dim]
                    .iter()
                    .map(|v| {
                        Vec3::new(
                            v[3 * a] - v[3 * b],
                            v[3 * a + 1] - v[3 * b + 1],
                            v[3 * a + 2] - v[3 * b + 2],
                        )
                    })
                    .collect();
                let mut d = [[0.0; 4]; 4];
                for k in 0..dim {
                    for l in 0..dim {
                        d[k][l] = diffs[k].dot(&diffs[l]);
                    }
                }
                dots.push(d);
                rho.push((frame.world[a] - frame.world[b]).norm_squared());
            }
        }
        Self { dots, rho, dim }
    }

    /// Linearized estimate of the coefficients from the products `beta_k beta_l`.
    fn initial_betas(&self) -> Option<Vec<f64>> {
        let n = self.dim;
        let pairs = self.rho.len();
        let full: Vec<(usize, usize)> = (0..n).flat_map(|k| (k..n).map(move |l| (k, l))).collect();
        // underdetermined linearizations fall back to the first-row products
        let monomials: Vec<(usize, usize)> = if full.len() <= pairs {
            full
        } else {
            (0..n).map(|l| (0, l)).collect()
        };
        let mut lhs = DMatrix::zeros(pairs, monomials.len());
        for (p, d) in self.dots.iter().enumerate() {
            for (c, &(k, l)) in monomials.iter().enumerate() {
                lhs[(p, c)] = if k == l { d[k][l] } else { 2.0 * d[k][l] };
            }
        }
        let rhs = DVector::from_column_slice(&self.rho);
        let sol = lhs.svd(true, true).solve(&rhs, 1e-14).ok()?;
        let b00 = sol[0].abs().sqrt();
        if !(b00 > 0.0 && b00.is_finite()) {
            return None;
        }
        let mut betas = vec![0.0; n];
        betas[0] = b00;
        for (c, &(k, l)) in monomials.iter().enumerate() {
            if k == 0 && l > 0 {
                betas[l] = sol[c] / b00;
            }
        }
        Some(betas)
    }

    fn refine(&self, betas: &mut [f64]) {
        let n = self.dim;
        for _ in 0..GAUSS_NEWTON_ITERS {
            let mut jtj = DMatrix::<f64>::zeros(n, n);
            let mut jtr = DVector::<f64>::zeros(n);
            for (d, rho) in self.dots.iter().zip(&self.rho) {
                let mut value = 0.0;
                let mut grad = [0.0; 4];
                for k in 0..n {
                    for l in 0..n {
                        value += betas[k] * betas[l] * d[k][l];
                        grad[k] += 2.0 * d[k][l] * betas[l];
                    }
                }
                let r = value - rho;
                for k in 0..n {
                    jtr[k] += grad[k] * r;
                    for l in 0..n {
                        jtj[(k, l)] += grad[k] * grad[l];
                    }
                }
            }
            let Some(step) = jtj.lu().solve(&(-jtr)) else {
                break;
            };
            if !step.iter().all(|x| x.is_finite()) {
                break;
            }
            for k in 0..n {
                betas[k] += step[k];
            }
        }
    }
}

/// EPnP on bearing vectors. Needs at least four non-collinear world points;
/// exactly coplanar sets use three control points.
pub fn epnp_bearing(corrs: &[Correspondence]) -> Result<Pose, PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::TooFewCorrespondences {
            need: 4,
            got: corrs.len(),
        });
    }
    let world: Vec<Vec3> = corrs.iter().map(|c| c.world_point).collect();
    let frame = control_frame(&world)?;
    let m = frame.count();
    let cols = 3 * m;

    let mut mtm = DMatrix::<f64>::zeros(cols, cols);
    let mut row = vec![0.0; cols];
    for (c, alpha) in corrs.iter().zip(&frame.alphas) {
        let (e1, e2) = tangent_basis(c.bearing.as_vec());
        for e in [e1, e2] {
            for j in 0..m {
                for k in 0..3 {
                    row[3 * j + k] = alpha[j] * e[k];
                }
            }
            for a in 0..cols {
                if row[a] == 0.0 {
                    continue;
                }
                for b in a..cols {
                    mtm[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            mtm[(a, b)] = mtm[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let max_dim = m.min(4);
    let null: Vec<DVector<f64>> = order[..max_dim]
        .iter()
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();

    let mut best: Option<(f64, Pose)> = None;
    let mut refined: Vec<Vec<f64>> = Vec::new();
    for dim in 1..=max_dim {
        let system = DistanceSystem::new(&frame, &null, dim);
        // the linearized start plus every lower-dimensional solution, zero padded
        let mut starts: Vec<Vec<f64>> = system.initial_betas().into_iter().collect();
        starts.extend(refined.iter().map(|b| {
            let mut padded = b.clone();
            padded.resize(dim, 0.0);
            padded
        }));
        for mut betas in starts {
            system.refine(&mut betas);
            let Some(pose) = pose_from_betas(corrs, &frame, &null, &betas) else {
                continue;
            };
            let residual =
                corrs.iter().map(|c| angular_residual(&pose, c)).sum::<f64>() / corrs.len() as f64;
            if best.as_ref().is_none_or(|(r, _)| residual < *r) {
                best = Some((residual, pose));
            }
            refined.push(betas);
        }
    }
    best.map(|(_, p)| p)
        .ok_or(PnpError::Degenerate("no valid null-space solution"))
}

fn pose_from_betas(
    corrs: &[Correspondence],
    frame: &ControlFrame,
    null: &[DVector<f64>],
    betas: &[f64],
) -> Option<Pose> {
    let m = frame.count();
    let mut camera: Vec<Vec3> = (0..m)
        .map(|j| {
            betas.iter().zip(null).fold(Vec3::zeros(), |acc, (b, v)| {
                acc + Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b
            })
        })
        .collect();
    if !camera.iter().all(|c| c.iter().all(|x| x.is_finite())) {
        return None;
    }
    // cheirality: points must lie along their bearings, not behind them
    let mut along: Vec<f64> = corrs
        .iter()
        .zip(&frame.alphas)
        .map(|(c, a)| {
            let p = (0..m).fold(Vec3::zeros(), |acc, j| acc + camera[j] * a[j]);
            c.bearing.as_vec().dot(&p)
        })
        .collect();
    along.sort_by(f64::total_cmp);
    if along[along.len() / 2] < 0.0 {
        camera.iter_mut().for_each(|c| *c = -*c);
    }
    let (r_wc, t) = rigid_align(&frame.world, &camera);
    Some(Pose {
        rotation: r_wc.transpose(),
        translation: t,
    })
}

/// Consensus-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Residuals strictly below this angle (degrees) are inliers.
    pub inlier_threshold_deg: f64,
    pub min_sample: usize,
    pub seed: u64,
    pub refit_on_inliers: bool,
    /// Evaluate hypotheses on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold_deg: 0.22,
            min_sample: 4,
            seed: 0,
            refit_on_inliers: true,
            parallel: false,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PnpError> {
        if self.iterations == 0 {
            return Err(PnpError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold_deg > 0.0 && self.inlier_threshold_deg < 90.0) {
            return Err(PnpError::InvalidConfig(format!(
                "threshold {} deg outside (0, 90)",
                self.inlier_threshold_deg
            )));
        }
        if self.min_sample < 4 {
            return Err(PnpError::InvalidConfig("min_sample must be >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inlier_indices: Vec<usize>,
    pub mean_inlier_angle: f64,
    pub iterations_used: usize,
    pub inlier_threshold_deg: f64,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    iteration: usize,
    pose: Pose,
    inliers: usize,
    residual_sum: f64,
}

impl Hypothesis {
    fn mean(&self) -> f64 {
        if self.inliers == 0 {
            f64::INFINITY
        } else {
            self.residual_sum / self.inliers as f64
        }
    }

    /// More inliers, then lower mean residual, then earlier iteration.
    fn better_than(&self, other: &Hypothesis) -> bool {
        use std::cmp::Ordering::*;
        match self.inliers.cmp(&other.inliers) {
            Greater => true,
            Less => false,
            Equal => match self.mean().total_cmp(&other.mean()) {
                Less => true,
                Greater => false,
                Equal => self.iteration < other.iteration,
            },
        }
    }
}

fn pick(a: Option<Hypothesis>, b: Option<Hypothesis>) -> Option<Hypothesis> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.better_than(&a) { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    }
}

fn score(pose: &Pose, corrs: &[Correspondence], threshold: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for c in corrs {
        let r = angular_residual(pose, c);
        if r < threshold {
            count += 1;
            sum += r;
        }
    }
    (count, sum)
}

fn inliers_of(pose: &Pose, corrs: &[Correspondence], threshold: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let r = angular_residual(pose, c);
        if r < threshold {
            idx.push(i);
            sum += r;
        }
    }
    let mean = if idx.is_empty() { f64::INFINITY } else { sum / idx.len() as f64 };
    (idx, mean)
}

/// Indices of the minimal sample drawn at `iteration`. Each iteration owns an
/// independent ChaCha stream, so samples do not depend on evaluation order.
pub fn sample_indices(seed: u64, iteration: usize, n: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    index::sample(&mut rng, n, k).into_vec()
}

fn hypothesis(corrs: &[Correspondence], cfg: &RansacConfig, iteration: usize) -> Option<Hypothesis> {
    let sample: Vec<Correspondence> = sample_indices(cfg.seed, iteration, corrs.len(), cfg.min_sample)
        .into_iter()
        .map(|i| corrs[i])
        .collect();
    let pose = epnp_bearing(&sample).ok()?;
    let (inliers, residual_sum) = score(&pose, corrs, cfg.inlier_threshold_deg);
    Some(Hypothesis {
        iteration,
        pose,
        inliers,
        residual_sum,
    })
}

#[cfg(feature = "parallel")]
fn best_hypothesis(corrs: &[Correspondence], cfg: &RansacConfig) -> Option<Hypothesis> {
    use rayon::prelude::*;
    if cfg.parallel {
        (0..cfg.iterations)
            .into_par_iter()
            .map(|i| hypothesis(corrs, cfg, i))
            .reduce(|| None, pick)
    } else {
        (0..cfg.iterations).map(|i| hypothesis(corrs, cfg, i)).fold(None, pick)
    }
}

#[cfg(not(feature = "parallel"))]
fn best_hypothesis(corrs: &[Correspondence], cfg: &RansacConfig) -> Option<Hypothesis> {
    (0..cfg.iterations).map(|i| hypothesis(corrs, cfg, i)).fold(None, pick)
}

/// Robust pose: best EPnP hypothesis over minimal samples, optionally refitted
/// on its inliers.
pub fn ransac_pnp(corrs: &[Correspondence], cfg: &RansacConfig) -> Result<PoseEstimate, PnpError> {
    cfg.validate()?;
    if corrs.len() < cfg.min_sample {
        return Err(PnpError::TooFewCorrespondences {
            need: cfg.min_sample,
            got: corrs.len(),
        });
    }
    let threshold = cfg.inlier_threshold_deg;
    let best = best_hypothesis(corrs, cfg);
    let Some(best) = best else {
        return Err(PnpError::NoConsensus { best: None });
    };
    let (inliers, mean) = inliers_of(&best.pose, corrs, threshold);
    let mut estimate = PoseEstimate {
        pose: best.pose,
        inlier_indices: inliers,
        mean_inlier_angle: mean,
        iterations_used: cfg.iterations,
        inlier_threshold_deg: threshold,
    };
    if best.inliers < cfg.min_sample + 1 {
        return Err(PnpError::NoConsensus {
            best: Some(Box::new(estimate)),
        });
    }
    if cfg.refit_on_inliers {
        let subset: Vec<Correspondence> = estimate.inlier_indices.iter().map(|&i| corrs[i]).collect();
        if let Ok(pose) = epnp_bearing(&subset) {
            let (inliers, mean) = inliers_of(&pose, corrs, threshold);
            if !inliers.is_empty() {
                estimate.pose = pose;
                estimate.inlier_indices = inliers;
                estimate.mean_inlier_angle = mean;
            }
        }
    }
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_pose_errors;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        *Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(-3.1..3.1)).matrix()
    }

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn synth(rng: &mut impl Rng, n: usize) -> (Pose, Vec<Correspondence>) {
        let pose = Pose::new(
            random_rotation(rng),
            Vec3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
            ),
        )
        .unwrap();
        let corrs = (0..n)
            .map(|_| {
                let cam = random_unit(rng) * rng.random_range(2.0..30.0);
                let world = pose.camera_to_world(&cam);
                Correspondence::new(Bearing::new(cam).unwrap(), world)
            })
            .collect();
        (pose, corrs)
    }

    fn rot_err(a: &Pose, b: &Pose) -> f64 {
        relative_pose_errors(a, b).1.to_radians()
    }

    #[test]
    fn identity_pose_from_six_points() {
        let pts = [
            Vec3::new(1.0, 0.2, 5.0),
            Vec3::new(-2.0, 1.0, 4.0),
            Vec3::new(0.5, -1.5, 6.0),
            Vec3::new(3.0, 2.0, -4.0),
            Vec3::new(-1.0, -3.0, 2.0),
            Vec3::new(4.0, 0.0, 1.0),
        ];
        let corrs: Vec<_> = pts
            .iter()
            .map(|p| Correspondence::new(Bearing::new(*p).unwrap(), *p))
            .collect();
        let pose = epnp_bearing(&corrs).unwrap();
        assert!(rot_err(&pose, &Pose::identity()) < 1e-6);
        assert!(pose.translation.norm() < 1e-6);
    }

    #[test]
    fn noiseless_recovery_many_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let (truth, corrs) = synth(&mut rng, 50);
            let est = epnp_bearing(&corrs).unwrap();
            let (d, _) = relative_pose_errors(&truth, &est);
            assert!(rot_err(&truth, &est) < 1e-4);
            assert!((est.translation - truth.translation).norm() < 1e-4, "{d}");
        }
    }

    #[test]
    fn planar_four_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let pose = Pose::new(random_rotation(&mut rng), Vec3::new(1.0, -2.0, 3.0)).unwrap();
            let center = pose.center();
            // facade plane x = center.x + 12
            let corrs: Vec<_> = (0..4)
                .map(|_| {
                    let w = Vec3::new(
                        center.x + 12.0,
                        center.y + rng.random_range(-8.0..8.0),
                        center.z + rng.random_range(-8.0..8.0),
                    );
                    Correspondence::new(Bearing::new(pose.world_to_camera(&w)).unwrap(), w)
                })
                .collect();
            let est = epnp_bearing(&corrs).unwrap();
            assert!(rot_err(&pose, &est) < 1e-3);
            assert!((est.translation - pose.translation).norm() < 1e-3);
        }
    }

    #[test]
    fn arity_and_degeneracy_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, corrs) = synth(&mut rng, 3);
        assert!(matches!(
            epnp_bearing(&corrs),
            Err(PnpError::TooFewCorrespondences { need: 4, got: 3 })
        ));
        let line: Vec<_> = (0..6)
            .map(|i| {
                let w = Vec3::new(i as f64, 2.0 * i as f64, 5.0 + i as f64);
                Correspondence::new(Bearing::new(w + Vec3::new(0.1, 0.0, 0.0)).unwrap(), w)
            })
            .collect();
        assert!(matches!(epnp_bearing(&line), Err(PnpError::Degenerate(_))));
    }

    #[test]
    fn residual_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pose, corrs) = synth(&mut rng, 20);
        for c in &corrs {
            assert!(angular_residual(&pose, c) < 1e-9);
            let flipped = Correspondence::new(Bearing::new(-*c.bearing.as_vec()).unwrap(), c.world_point);
            assert!((angular_residual(&pose, &flipped) - 180.0).abs() < 1e-9);
        }
        let at_center = Correspondence::new(Bearing::new(Vec3::z()).unwrap(), pose.center());
        assert_eq!(angular_residual(&pose, &at_center), 180.0);
    }

    #[test]
    fn residual_matches_small_angle_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = Pose::new(random_rotation(&mut rng), Vec3::new(3.0, 1.0, -2.0)).unwrap();
        for _ in 0..200 {
            let dir = random_unit(&mut rng);
            let depth = rng.random_range(5.0..50.0);
            let perp = dir.cross(&random_unit(&mut rng)).normalize();
            let delta = rng.random_range(0.01..0.5);
            let cam = dir * depth + perp * delta;
            let c = Correspondence::new(Bearing::new(dir).unwrap(), pose.camera_to_world(&cam));
            let oracle = (delta / depth).atan().to_degrees();
            let r = angular_residual(&pose, &c);
            assert!((r - oracle).abs() <= 0.01 * oracle, "{r} vs {oracle}");
        }
    }

    #[test]
    fn epnp_is_rigidly_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let (_, corrs) = synth(&mut rng, 30);
            let g = random_rotation(&mut rng);
            let gt = Vec3::new(100.0, -20.0, 55.0);
            let moved: Vec<_> = corrs
                .iter()
                .map(|c| Correspondence::new(c.bearing, g * c.world_point + gt))
                .collect();
            let a = epnp_bearing(&corrs).unwrap();
            let b = epnp_bearing(&moved).unwrap();
            let expected = a.transform_world(&g, &gt);
            assert!((b.center() - expected.center()).norm() < 1e-6);
            assert!((b.rotation - expected.rotation).amax() < 1e-6);
        }
    }

    #[test]
    fn ransac_config_validation() {
        let bad = [
            RansacConfig { iterations: 0, ..Default::default() },
            RansacConfig { inlier_threshold_deg: 0.0, ..Default::default() },
            RansacConfig { inlier_threshold_deg: 90.0, ..Default::default() },
            RansacConfig { min_sample: 3, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        let d = RansacConfig::default();
        assert_eq!((d.iterations, d.inlier_threshold_deg, d.min_sample), (1000, 0.22, 4));
        assert!(d.refit_on_inliers);
    }

    #[test]
    fn ransac_clean_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (truth, corrs) = synth(&mut rng, 100);
        let est = ransac_pnp(&corrs, &RansacConfig::default()).unwrap();
        assert_eq!(est.iterations_used, 1000);
        assert_eq!(est.inlier_threshold_deg, 0.22);
        assert_eq!(est.inlier_indices, (0..100).collect::<Vec<_>>());
        assert!(rot_err(&truth, &est.pose) < 1e-4);
        assert!((truth.translation - est.pose.translation).norm() < 1e-4);
        assert!(est.mean_inlier_angle <= est.inlier_threshold_deg);
    }

    #[test]
    fn ransac_with_outliers_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (truth, mut corrs) = synth(&mut rng, 200);
        for c in corrs.iter_mut().take(80) {
            c.world_point = Vec3::new(
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
            );
        }
        let cfg = RansacConfig { seed: 9, ..Default::default() };
        let a = ransac_pnp(&corrs, &cfg).unwrap();
        let b = ransac_pnp(&corrs, &RansacConfig { parallel: true, ..cfg }).unwrap();
        assert_eq!(a, b);
        let (d, ang) = relative_pose_errors(&truth, &a.pose);
        assert!(d < 0.05 && ang < 0.1, "{d} {ang}");
        assert!(a.inlier_indices.iter().all(|&i| i >= 80));
    }

    #[test]
    fn ransac_reports_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let corrs: Vec<_> = (0..30)
            .map(|_| {
                Correspondence::new(
                    Bearing::new(random_unit(&mut rng)).unwrap(),
                    random_unit(&mut rng) * rng.random_range(5.0..50.0),
                )
            })
            .collect();
        let cfg = RansacConfig { iterations: 50, inlier_threshold_deg: 0.01, ..Default::default() };
        match ransac_pnp(&corrs, &cfg) {
            Err(PnpError::NoConsensus { best }) => assert!(best.is_some()),
            other => panic!("expected no consensus, got {other:?}"),
        }
        assert!(matches!(
            ransac_pnp(&corrs[..3], &cfg),
            Err(PnpError::TooFewCorrespondences { .. })
        ));
    }

    #[test]
    fn sampling_is_keyed_by_iteration() {
        assert_eq!(sample_indices(1, 7, 100, 4), sample_indices(1, 7, 100, 4));
        assert_ne!(sample_indices(1, 7, 100, 4), sample_indices(1, 8, 100, 4));
        let s = sample_indices(3, 0, 10, 4);
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 4);
    }
}
