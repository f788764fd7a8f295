//! Browser bindings: build a small synthetic city, render its panoramas and
//! localise a frame from simulated network predictions.

use serde_json::json;
use wasm_bindgen::prelude::*;

use panoloc::eval::coord_accuracy;
use panoloc::geometry::{relative_pose_errors, ImageDims, Pose};
use panoloc::instance_map::{build_instance_map, InstanceMap};
use panoloc::labels::{is_building, LabelId, ROAD, SKY};
use panoloc::pipeline::{bearings_for, localize_frame, LocalizeConfig};
use panoloc::pnp::PnpError;
use panoloc::scene_sim::{
    generate_city, raycast_render, sample_surface_cloud, sample_trajectory, simulate_predictions, Aabb, CityPreset,
    CityScene, NoiseModel, TrajectoryConfig,
};

const CLOUD_SPACING: f64 = 1.0;
const MAX_WIDTH: usize = 2048;

#[wasm_bindgen]
pub struct Demo {
    scene: CityScene,
    map: InstanceMap,
    poses: Vec<Pose>,
    volume: Aabb,
}

#[wasm_bindgen]
impl Demo {
    /// Small-preset city with `frames` trajectory poses.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, frames: usize) -> Result<Demo, String> {
        let p = CityPreset::small();
        let scene = generate_city(p.buildings, p.grid, p.sizes, seed.into()).map_err(|e| e.to_string())?;
        let traj = TrajectoryConfig {
            count: frames.max(1),
            seed: seed.into(),
            ..Default::default()
        };
        let poses = sample_trajectory(&scene, &traj)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let cloud = sample_surface_cloud(&scene, CLOUD_SPACING);
        let map = build_instance_map(cloud.iter().map(|(p, l)| (p, *l))).map;
        let volume = scene.bounds().inflated(1.1);
        Ok(Demo { scene, map, poses, volume })
    }

    #[wasm_bindgen(getter)]
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    /// Building footprints and camera centers in the ground plane, as JSON.
    pub fn layout_json(&self) -> String {
        let b = self.scene.bounds();
        let buildings: Vec<_> = self
            .scene
            .buildings
            .iter()
            .map(|c| json!({ "label": c.instance_label, "footprint": c.footprint() }))
            .collect();
        let cameras: Vec<[f64; 2]> = self.poses.iter().map(|p| [p.center().x, p.center().z]).collect();
        json!({
            "min": [b.min.x, b.min.z],
            "max": [b.max.x, b.max.z],
            "buildings": buildings,
            "cameras": cameras,
        })
        .to_string()
    }

    /// RGBA pixels of frame `frame` at `width x width/2`; `mode` is
    /// `labels` or `depth`.
    pub fn render(&self, frame: usize, width: usize, mode: &str) -> Result<Vec<u8>, String> {
        let pose = self.pose(frame)?;
        let dims = dims(width)?;
        let r = raycast_render(&self.scene, pose, dims);
        let center = pose.center();
        let mut out = Vec::with_capacity(dims.pixel_count() * 4);
        for i in 0..dims.pixel_count() {
            let rgb = match mode {
                "labels" => label_color(r.labels.get(i)),
                "depth" => match r.coords.get(i) {
                    Some(s) => depth_shade((s - center).norm()),
                    None => [0, 0, 0],
                },
                other => return Err(format!("unknown mode {other:?}")),
            };
            out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
        }
        Ok(out)
    }

    /// Corrupt the ground truth of `frame` and localise it; returns JSON
    /// with the pose error or the failure reason.
    pub fn localize(
        &self,
        frame: usize,
        width: usize,
        sigma: f64,
        outlier_rate: f64,
        flip_rate: f64,
        seed: u32,
    ) -> Result<String, String> {
        let truth = self.pose(frame)?;
        let dims = dims(width)?;
        let nm = NoiseModel {
            coord_sigma: sigma,
            outlier_rate,
            label_flip_rate: flip_rate,
            seed: seed.into(),
        };
        nm.validate().map_err(|e| e.to_string())?;
        let gt = raycast_render(&self.scene, truth, dims);
        let pred = simulate_predictions(&gt.coords, &gt.labels, &nm, &self.map, &self.volume, frame as u64)
            .map_err(|e| e.to_string())?;
        let building_pixels = gt.labels.raw().iter().filter(|l| is_building(**l)).count();
        let within = coord_accuracy(&pred.coords, &gt.coords)
            .ok()
            .map(|m| m.pct_within_0_5m);
        let result = localize_frame(&pred.local, &pred.labels, &self.map, &bearings_for(dims), &LocalizeConfig::default());
        let report = match result {
            Ok(est) => {
                let (dist, angle) = relative_pose_errors(&est.pose, truth);
                let c = est.pose.center();
                json!({
                    "ok": true,
                    "dist_m": dist,
                    "angle_deg": angle,
                    "inliers": est.inlier_indices.len(),
                    "center": [c.x, c.z],
                    "building_pixels": building_pixels,
                    "pct_within_0_5m": within,
                })
            }
            Err(e) => json!({
                "ok": false,
                "reason": match e {
                    PnpError::NoConsensus { .. } => "no consensus".to_string(),
                    other => other.to_string(),
                },
                "building_pixels": building_pixels,
                "pct_within_0_5m": within,
            }),
        };
        Ok(report.to_string())
    }
}

impl Demo {
    fn pose(&self, frame: usize) -> Result<&Pose, String> {
        self.poses
            .get(frame)
            .ok_or_else(|| format!("frame {frame} out of range 0..{}", self.poses.len()))
    }
}

fn dims(width: usize) -> Result<ImageDims, String> {
    if !(2..=MAX_WIDTH).contains(&width) {
        return Err(format!("width {width} outside 2..={MAX_WIDTH}"));
    }
    ImageDims::new(width, width / 2).map_err(|e| e.to_string())
}

fn label_color(label: LabelId) -> [u8; 3] {
    match label {
        SKY => [170, 205, 235],
        ROAD => [90, 90, 96],
        l if is_building(l) => {
            // golden-ratio hue walk keeps neighbouring ids apart
            let hue = (l as f64 * 0.618_033_988_749_895).fract();
            hsv(hue, 0.55, 0.9)
        }
        _ => [0, 0, 0],
    }
}

fn depth_shade(d: f64) -> [u8; 3] {
    let v = (255.0 * (1.0 - (d / 300.0).min(1.0)).powi(2)) as u8;
    [v, v, v]
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn render_fills_every_pixel() {
        let demo = Demo::new(3, 4).unwrap();
        assert_eq!(demo.frame_count(), 4);
        for mode in ["labels", "depth"] {
            let px = demo.render(1, 64, mode).unwrap();
            assert_eq!(px.len(), 64 * 32 * 4);
            assert!(px.chunks(4).all(|c| c[3] == 255));
        }
        assert!(demo.render(1, 64, "normals").is_err());
        assert!(demo.render(9, 64, "labels").is_err());
        assert!(demo.render(0, 1, "labels").is_err());
    }

    #[test]
    fn clean_frame_localises_exactly() {
        let demo = Demo::new(3, 2).unwrap();
        let r: Value = serde_json::from_str(&demo.localize(0, 128, 0.0, 0.0, 0.0, 1).unwrap()).unwrap();
        assert_eq!(r["ok"], true);
        assert!(r["dist_m"].as_f64().unwrap() < 1e-6);
        assert_eq!(r["pct_within_0_5m"], 100.0);
    }

    #[test]
    fn noisy_frame_still_localises() {
        let demo = Demo::new(3, 2).unwrap();
        let r: Value = serde_json::from_str(&demo.localize(1, 256, 0.3, 0.1, 0.05, 1).unwrap()).unwrap();
        assert_eq!(r["ok"], true, "{r}");
        assert!(r["dist_m"].as_f64().unwrap() < 1.0);
        assert!(demo.localize(1, 256, -1.0, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn layout_lists_every_building_and_camera() {
        let demo = Demo::new(5, 3).unwrap();
        let v: Value = serde_json::from_str(&demo.layout_json()).unwrap();
        assert_eq!(v["buildings"].as_array().unwrap().len(), 102);
        assert_eq!(v["cameras"].as_array().unwrap().len(), 3);
    }
}
