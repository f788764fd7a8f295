//! Per-frame localisation from predicted labels and local coordinates.

use serde::{Deserialize, Serialize};

use crate::geometry::{Bearing, ImageDims};
use crate::image::{LabelImage, SceneCoordinateImage};
use crate::instance_map::InstanceMap;
use crate::labels::is_building;
use crate::pnp::{ransac_pnp, Correspondence, PnpError, PoseEstimate, RansacConfig};

/// Correspondences kept per frame; larger sets are thinned with a fixed stride.
pub const DEFAULT_MAX_CORRESPONDENCES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub ransac: RansacConfig,
    pub max_correspondences: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            max_correspondences: DEFAULT_MAX_CORRESPONDENCES,
        }
    }
}

/// Building pixels whose predicted label has a transform, with local
/// coordinates unwhitened into the world frame.
pub fn correspondences_from_local(
    local: &SceneCoordinateImage,
    labels: &LabelImage,
    map: &InstanceMap,
    bearings: &[Bearing],
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for (i, b) in bearings.iter().enumerate() {
        let Some(t) = map.get(labels.get(i)) else { continue };
        let Some(c) = local.get(i) else { continue };
        out.push(Correspondence::new(*b, t.unwhiten(&c)));
    }
    out
}

/// Building pixels with valid world-space predictions.
pub fn correspondences_from_coords(
    coords: &SceneCoordinateImage,
    labels: &LabelImage,
    bearings: &[Bearing],
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for (i, b) in bearings.iter().enumerate() {
        if !is_building(labels.get(i)) {
            continue;
        }
        if let Some(s) = coords.get(i) {
            out.push(Correspondence::new(*b, s));
        }
    }
    out
}

/// Keep at most `cap` items at evenly spaced positions `floor(k n / cap)`.
pub fn thin<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    let n = items.len();
    if n <= cap || cap == 0 {
        return items.to_vec();
    }
    (0..cap).map(|k| items[k * n / cap].clone()).collect()
}

/// Thin the correspondences and run RANSAC.
pub fn localize_correspondences(corrs: &[Correspondence], cfg: &LocalizeConfig) -> Result<PoseEstimate, PnpError> {
    ransac_pnp(&thin(corrs, cfg.max_correspondences), &cfg.ransac)
}

/// Localise one frame from predicted local coordinates.
pub fn localize_frame(
    local: &SceneCoordinateImage,
    labels: &LabelImage,
    map: &InstanceMap,
    bearings: &[Bearing],
    cfg: &LocalizeConfig,
) -> Result<PoseEstimate, PnpError> {
    localize_correspondences(&correspondences_from_local(local, labels, map, bearings), cfg)
}

/// Bearing of every pixel center, row-major.
pub fn bearings_for(dims: ImageDims) -> Vec<Bearing> {
    crate::losses::pixel_bearings(dims)
}
