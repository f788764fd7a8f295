//! Training losses for scene-coordinate and label prediction, evaluated as
//! deterministic scoring functions with analytic gradients.
//!
//! Reconstruction and reprojection terms are summed over pixels; cross
//! entropy is averaged over pixels.

use thiserror::Error;

use crate::geometry::{Bearing, ImageDims, PixelCoord, Pose, Vec3};
use crate::image::{LabelImage, LogitImage, SceneCoordinateImage};
use crate::instance_map::InstanceMap;
use crate::labels::{LabelId, ROAD, SKY, VOID};
use crate::numeric::CompensatedSum;

/// Camera-frame points shorter than this are skipped by the reprojection loss.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("image sizes differ: {0} vs {1} pixels")]
    SizeMismatch(usize, usize),
    #[error("label {0} has no logit channel")]
    UnknownLabel(LabelId),
    #[error("logit image has {got} channels, label space has {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Reprojection share in the mixed reconstruction/reprojection loss.
    pub alpha: f64,
    /// Weight on the world-space reconstruction term next to cross entropy.
    pub w_rec_global: f64,
    /// Weight on the whitened-space reconstruction term next to cross entropy.
    pub w_rec_local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            w_rec_global: 0.1,
            w_rec_local: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LossError::InvalidWeights("alpha must lie in (0, 1)"));
        }
        if !(self.w_rec_global > 0.0 && self.w_rec_local > 0.0) {
            return Err(LossError::InvalidWeights("reconstruction weights must be positive"));
        }
        Ok(())
    }
}

/// Loss value with gradients. `grad_coords` has one entry per pixel (zero for
/// pixels outside the sum); `grad_logits` matches the logit layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_coords: Vec<Vec3>,
    pub grad_logits: Vec<f64>,
    /// Pixels dropped because their camera-frame direction was degenerate.
    pub skipped: usize,
}

/// Ordered list of panoptic labels; a label's position is its logit channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<LabelId>,
}

impl LabelSpace {
    pub fn new(mut labels: Vec<LabelId>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Self { labels }
    }

    /// Stuff classes followed by every instance in `map`.
    pub fn from_map(map: &InstanceMap) -> Self {
        Self::new([VOID, SKY, ROAD].into_iter().chain(map.labels()).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channel(&self, label: LabelId) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn label(&self, channel: usize) -> LabelId {
        self.labels[channel]
    }
}

/// Bearing of every pixel center, row-major.
pub fn pixel_bearings(dims: ImageDims) -> Vec<Bearing> {
    let mut out = Vec::with_capacity(dims.pixel_count());
    for row in 0..dims.height {
        for col in 0..dims.width {
            let p = PixelCoord {
                u: col as f64,
                v: row as f64,
            };
            out.push(crate::geometry::pixel_to_bearing(p, dims).expect("pixel center in range"));
        }
    }
    out
}

fn check_len(a: usize, b: usize) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::SizeMismatch(a, b));
    }
    Ok(())
}

/// Sum over valid predictions of `| normalize(R^T S + T) - V |`.
pub fn loss_l1_repr(
    s: &SceneCoordinateImage,
    pose: &Pose,
    bearings: &[Bearing],
) -> Result<LossOutput, LossError> {
    let n = s.dims().pixel_count();
    check_len(n, bearings.len())?;
    let mut sum = CompensatedSum::default();
    let mut grad = vec![Vec3::zeros(); n];
    let mut skipped = 0;
    for (i, b) in bearings.iter().enumerate() {
        let Some(sp) = s.get(i) else { continue };
        let u = pose.world_to_camera(&sp);
        let len = u.norm();
        if len < MIN_DIRECTION_NORM {
            skipped += 1;
            continue;
        }
        let dir = u / len;
        let diff = dir - b.as_vec();
        let f = diff.norm();
        sum.add(f);
        if f > 0.0 {
            // d f / d u = (I - dir dir^T) / |u| * diff / f
            let g_dir = diff / f;
            let g_u = (g_dir - dir * dir.dot(&g_dir)) / len;
            grad[i] = pose.rotation * g_u;
        }
    }
    Ok(LossOutput {
        value: sum.value(),
        grad_coords: grad,
        grad_logits: Vec::new(),
        skipped,
    })
}

/// Euclidean reconstruction error summed over pixels with ground truth.
pub fn loss_l2_rec(s: &SceneCoordinateImage, s_gt: &SceneCoordinateImage) -> Result<LossOutput, LossError> {
    check_len(s.dims().pixel_count(), s_gt.dims().pixel_count())?;
    distance_sum(s, s_gt, |_| true)
}

fn distance_sum(
    s: &SceneCoordinateImage,
    s_gt: &SceneCoordinateImage,
    include: impl Fn(usize) -> bool,
) -> Result<LossOutput, LossError> {
    let n = s.dims().pixel_count();
    let mut sum = CompensatedSum::default();
    let mut grad = vec![Vec3::zeros(); n];
    let mut skipped = 0;
    for (i, g) in grad.iter_mut().enumerate() {
        let Some(gt) = s_gt.get(i) else { continue };
        if !include(i) {
            continue;
        }
        let Some(sp) = s.get(i) else {
            skipped += 1;
            continue;
        };
        let d = sp - gt;
        let f = d.norm();
        sum.add(f);
        if f > 0.0 {
            *g = d / f;
        }
    }
    Ok(LossOutput {
        value: sum.value(),
        grad_coords: grad,
        grad_logits: Vec::new(),
        skipped,
    })
}

/// `alpha * L1 + (1 - alpha) * L2`.
pub fn loss_l3(
    s: &SceneCoordinateImage,
    s_gt: &SceneCoordinateImage,
    pose: &Pose,
    bearings: &[Bearing],
    w: &LossWeights,
) -> Result<LossOutput, LossError> {
    let l1 = loss_l1_repr(s, pose, bearings)?;
    let l2 = loss_l2_rec(s, s_gt)?;
    let a = w.alpha;
    Ok(LossOutput {
        value: a * l1.value + (1.0 - a) * l2.value,
        grad_coords: l1
            .grad_coords
            .iter()
            .zip(&l2.grad_coords)
            .map(|(g1, g2)| g1 * a + g2 * (1.0 - a))
            .collect(),
        grad_logits: Vec::new(),
        skipped: l1.skipped + l2.skipped,
    })
}

/// Pixel-averaged softmax cross entropy; gradient is `(softmax - onehot) / N`.
pub fn cross_entropy(
    logits: &LogitImage,
    labels: &LabelImage,
    space: &LabelSpace,
) -> Result<LossOutput, LossError> {
    let n = labels.dims().pixel_count();
    check_len(logits.pixel_count, n)?;
    if logits.channels != space.len() {
        return Err(LossError::ChannelMismatch {
            got: logits.channels,
            expected: space.len(),
        });
    }
    let mut sum = CompensatedSum::default();
    let mut grad = vec![0.0; logits.scores.len()];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let label = labels.get(i);
        let target = space.channel(label).ok_or(LossError::UnknownLabel(label))?;
        let z = logits.pixel(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum.add(lse - z[target]);
        let g = &mut grad[i * logits.channels..(i + 1) * logits.channels];
        for (c, gc) in g.iter_mut().enumerate() {
            let p = (z[c] - lse).exp();
            *gc = (p - if c == target { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok(LossOutput {
        value: sum.value() * inv_n,
        grad_coords: vec![Vec3::zeros(); n],
        grad_logits: grad,
        skipped: 0,
    })
}

/// Cross entropy plus weighted world-space reconstruction.
pub fn loss_l4(
    s: &SceneCoordinateImage,
    s_gt: &SceneCoordinateImage,
    logits: &LogitImage,
    labels: &LabelImage,
    space: &LabelSpace,
    w: &LossWeights,
) -> Result<LossOutput, LossError> {
    let ce = cross_entropy(logits, labels, space)?;
    let rec = loss_l2_rec(s, s_gt)?;
    Ok(combine(ce, rec, w.w_rec_global))
}

/// Cross entropy plus weighted reconstruction in whitened instance space.
/// Only pixels whose ground-truth label has a whitening transform contribute
/// to the reconstruction term.
#[allow(clippy::too_many_arguments)]
pub fn loss_l5(
    c: &SceneCoordinateImage,
    c_gt: &SceneCoordinateImage,
    logits: &LogitImage,
    labels: &LabelImage,
    space: &LabelSpace,
    map: &InstanceMap,
    w: &LossWeights,
) -> Result<LossOutput, LossError> {
    check_len(c.dims().pixel_count(), c_gt.dims().pixel_count())?;
    check_len(c.dims().pixel_count(), labels.dims().pixel_count())?;
    let ce = cross_entropy(logits, labels, space)?;
    let rec = distance_sum(c, c_gt, |i| map.get(labels.get(i)).is_some())?;
    Ok(combine(ce, rec, w.w_rec_local))
}

fn combine(ce: LossOutput, rec: LossOutput, weight: f64) -> LossOutput {
    LossOutput {
        value: ce.value + weight * rec.value,
        grad_coords: rec.grad_coords.iter().map(|g| g * weight).collect(),
        grad_logits: ce.grad_logits,
        skipped: rec.skipped,
    }
}
