//! Evaluation protocol: scene-coordinate accuracy, pose error percentiles and
//! sorted error curves.
//!
//! Thresholds are inclusive (`d <= t`). Pixels without ground truth are left
//! out of every denominator; pixels with ground truth but no prediction count
//! as misses at every threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{LabelImage, SceneCoordinateImage};
use crate::labels::is_building;
use crate::numeric::ExactSum;

pub const COORD_THRESHOLDS: [f64; 3] = [0.5, 1.0, 3.0];
pub const THRESHOLD_RULE: &str = "inclusive: d <= t";
pub const PERCENTILE_RULE: &str = "linear interpolation at rank p/100*(n-1) over ascending errors";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no pixels with ground truth")]
    EmptyMetrics,
    #[error("image sizes differ: {0} vs {1} pixels")]
    SizeMismatch(usize, usize),
    #[error("no pose errors to aggregate")]
    EmptyErrors,
    #[error("non-finite pose error at index {0}")]
    NonFinite(usize),
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("thresholds must be finite, non-negative and ascending")]
    BadThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordMetrics {
    pub pct_within_0_5m: f64,
    pub pct_within_1m: f64,
    pub pct_within_3m: f64,
    /// Mean distance over pixels within 3 m; `None` when there are none.
    pub mean_dist_within_3m: Option<f64>,
    pub n_valid: usize,
}

/// Share of `n` as a percentage; every metric uses this one expression.
fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

/// `None` for a ground-truth pixel without a prediction.
fn pixel_distance(pred: &SceneCoordinateImage, gt: &SceneCoordinateImage, i: usize) -> Option<Option<f64>> {
    let g = gt.get(i)?;
    Some(pred.get(i).map(|p| (p - g).norm()))
}

fn check_dims(pred: &SceneCoordinateImage, gt: &SceneCoordinateImage) -> Result<(), EvalError> {
    let (a, b) = (pred.dims().pixel_count(), gt.dims().pixel_count());
    if a != b {
        return Err(EvalError::SizeMismatch(a, b));
    }
    Ok(())
}

/// Running coordinate-accuracy counts, pooled over any number of images.
#[derive(Debug, Clone, Default)]
pub struct CoordTally {
    n_valid: usize,
    within: [usize; 3],
    sum_within_3m: ExactSum,
}

impl CoordTally {
    pub fn add_image(
        &mut self,
        pred: &SceneCoordinateImage,
        gt: &SceneCoordinateImage,
        include: impl Fn(usize) -> bool,
    ) -> Result<(), EvalError> {
        check_dims(pred, gt)?;
        for i in 0..gt.dims().pixel_count() {
            if !include(i) {
                continue;
            }
            let Some(d) = pixel_distance(pred, gt, i) else { continue };
            self.n_valid += 1;
            let Some(d) = d else { continue };
            for (count, t) in self.within.iter_mut().zip(COORD_THRESHOLDS) {
                if d <= t {
                    *count += 1;
                }
            }
            if d <= COORD_THRESHOLDS[2] {
                self.sum_within_3m.add(d);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CoordTally) {
        self.n_valid += other.n_valid;
        for k in 0..3 {
            self.within[k] += other.within[k];
        }
        self.sum_within_3m.merge(&other.sum_within_3m);
    }

    pub fn metrics(&self) -> Result<CoordMetrics, EvalError> {
        if self.n_valid == 0 {
            return Err(EvalError::EmptyMetrics);
        }
        let n3 = self.within[2];
        Ok(CoordMetrics {
            pct_within_0_5m: percent(self.within[0], self.n_valid),
            pct_within_1m: percent(self.within[1], self.n_valid),
            pct_within_3m: percent(n3, self.n_valid),
            mean_dist_within_3m: (n3 > 0).then(|| self.sum_within_3m.value() / n3 as f64),
            n_valid: self.n_valid,
        })
    }
}

pub fn coord_accuracy(pred: &SceneCoordinateImage, gt: &SceneCoordinateImage) -> Result<CoordMetrics, EvalError> {
    let mut t = CoordTally::default();
    t.add_image(pred, gt, |_| true)?;
    t.metrics()
}

/// Accuracy restricted to pixels whose ground-truth label is a building.
pub fn coord_accuracy_buildings(
    pred: &SceneCoordinateImage,
    gt: &SceneCoordinateImage,
    gt_labels: &LabelImage,
) -> Result<CoordMetrics, EvalError> {
    let mut t = CoordTally::default();
    t.add_image(pred, gt, |i| is_building(gt_labels.get(i)))?;
    t.metrics()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub pct: f64,
}

/// Running cumulative accuracy counts over a fixed threshold grid.
#[derive(Debug, Clone)]
pub struct RocTally {
    thresholds: Vec<f64>,
    counts: Vec<usize>,
    n_valid: usize,
}

impl RocTally {
    pub fn new(thresholds: &[f64]) -> Result<Self, EvalError> {
        let ok = thresholds.iter().all(|t| t.is_finite() && *t >= 0.0)
            && thresholds.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(EvalError::BadThresholds);
        }
        Ok(Self {
            thresholds: thresholds.to_vec(),
            counts: vec![0; thresholds.len()],
            n_valid: 0,
        })
    }

    pub fn add_image(
        &mut self,
        pred: &SceneCoordinateImage,
        gt: &SceneCoordinateImage,
        include: impl Fn(usize) -> bool,
    ) -> Result<(), EvalError> {
        check_dims(pred, gt)?;
        for i in 0..gt.dims().pixel_count() {
            if !include(i) {
                continue;
            }
            let Some(d) = pixel_distance(pred, gt, i) else { continue };
            self.n_valid += 1;
            let Some(d) = d else { continue };
            // first threshold with d <= t; the counts are cumulated in `curve`
            let k = self.thresholds.partition_point(|t| *t < d);
            if k < self.counts.len() {
                self.counts[k] += 1;
            }
        }
        Ok(())
    }

    pub fn curve(&self) -> Result<Vec<RocPoint>, EvalError> {
        if self.n_valid == 0 {
            return Err(EvalError::EmptyMetrics);
        }
        let mut cum = 0;
        Ok(self
            .thresholds
            .iter()
            .zip(&self.counts)
            .map(|(t, c)| {
                cum += c;
                RocPoint {
                    threshold: *t,
                    pct: percent(cum, self.n_valid),
                }
            })
            .collect())
    }
}

/// Percentage of ground-truth pixels within each threshold.
pub fn distance_roc(
    pred: &SceneCoordinateImage,
    gt: &SceneCoordinateImage,
    thresholds: &[f64],
) -> Result<Vec<RocPoint>, EvalError> {
    let mut t = RocTally::new(thresholds)?;
    t.add_image(pred, gt, |_| true)?;
    t.curve()
}

/// Grid `0, step, 2 step, ..., max` built as `k / per_meter` so that whole
/// and half meters are represented exactly.
pub fn threshold_grid(max_m: f64, per_meter: u32) -> Vec<f64> {
    let n = (max_m * per_meter as f64).round() as u32;
    (0..=n).map(|k| k as f64 / per_meter as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileEntry {
    pub percentile: f64,
    pub dist: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub median_dist: f64,
    pub p95_dist: f64,
    pub median_angle: f64,
    pub p95_angle: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_percentiles: Vec<PercentileEntry>,
    pub n: usize,
}

/// Percentile of ascending `sorted` with linear interpolation between ranks.
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64, EvalError> {
    if sorted.is_empty() {
        return Err(EvalError::EmptyErrors);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(EvalError::BadPercentile(p));
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    let v = sorted[lo] + frac * (sorted[hi] - sorted[lo]);
    Ok(v.min(sorted[hi]))
}

/// Median, 95th and any extra percentiles of `(distance m, angle deg)` errors.
pub fn pose_metrics(errors: &[(f64, f64)], extra: &[f64]) -> Result<PoseMetrics, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyErrors);
    }
    if let Some(i) = errors.iter().position(|(d, a)| !d.is_finite() || !a.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    let (dist, angle) = error_curves(errors);
    let at = |p: f64| -> Result<(f64, f64), EvalError> { Ok((percentile(&dist, p)?, percentile(&angle, p)?)) };
    let (median_dist, median_angle) = at(50.0)?;
    let (p95_dist, p95_angle) = at(95.0)?;
    let extra_percentiles = extra
        .iter()
        .map(|&p| {
            at(p).map(|(d, a)| PercentileEntry {
                percentile: p,
                dist: d,
                angle: a,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(PoseMetrics {
        median_dist,
        p95_dist,
        median_angle,
        p95_angle,
        extra_percentiles,
        n: errors.len(),
    })
}

/// Distance and angle errors, each sorted ascending.
pub fn error_curves(errors: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut dist: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let mut angle: Vec<f64> = errors.iter().map(|e| e.1).collect();
    dist.sort_by(f64::total_cmp);
    angle.sort_by(f64::total_cmp);
    (dist, angle)
}

/// `rank,value` CSV with 1-based ranks.
pub fn curve_csv(values: &[f64]) -> String {
    let mut out = String::from("rank,value\n");
    for (k, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", k + 1, v));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub thresholds: String,
    pub percentiles: String,
    pub denominators: String,
    pub failed_frames: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            thresholds: THRESHOLD_RULE.into(),
            percentiles: PERCENTILE_RULE.into(),
            denominators: "pixels with ground truth; missing predictions count as misses".into(),
            failed_frames: "excluded from pose percentiles and counted in failed_frames".into(),
        }
    }
}

/// Evaluation report as written by the command line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub coord: Option<CoordMetrics>,
    /// Same statistics over ground-truth building pixels only.
    pub coord_buildings: Option<CoordMetrics>,
    pub pose: Option<PoseMetrics>,
    pub frames: usize,
    pub failed_frames: usize,
    pub conventions: Conventions,
}
