use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use panoloc::eval::{
    curve_csv, error_curves, pose_metrics, threshold_grid, Conventions, CoordTally, Report, RocTally,
};
use panoloc::files::{
    gt_coords_name, gt_labels_name, pred_coords_name, pred_labels_name, pred_local_name, read_jsonl, read_ply,
    read_poses, write_jsonl, write_ply, write_poses, EstimateRecord,
};
use panoloc::geometry::{relative_pose_errors, ImageDims, Pose, Vec3};
use panoloc::image::{LabelImage, SceneCoordinateImage};
use panoloc::instance_map::{build_instance_map, InstanceMap, InstanceMapFile};
use panoloc::labels::{is_building, LabelId};
use panoloc::pipeline::{
    bearings_for, correspondences_from_coords, correspondences_from_local, localize_correspondences, LocalizeConfig,
};
use panoloc::pnp::{PnpError, RansacConfig};
use panoloc::scene_sim::{
    generate_city, raycast_render, sample_surface_cloud, sample_trajectory, simulate_predictions, Aabb, CityPreset,
    CityScene, NoiseModel, SceneFile, TrajectoryConfig,
};

use crate::{bad_input, Classify, Common, EvaluateArgs, Failure, FitMapArgs, GenerateArgs, LocalizeArgs, PredictArgs, RenderArgs};

const GT_COORDS_SUFFIX: &str = ".gt.scrd";
const PRED_LABELS_SUFFIX: &str = ".pred.lbls";
const OUTLIER_VOLUME_SCALE: f64 = 1.1;

fn required<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| bad_input(format!("missing --{flag}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).output("serialising")?;
    text.push('\n');
    std::fs::write(path, text).output(format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .output(format!("creating {}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .input(format!("opening {}", path.display()))
}

fn read_scene(path: &Path) -> Result<CityScene, Failure> {
    let file: SceneFile = serde_json::from_reader(open(path)?).input(format!("parsing {}", path.display()))?;
    CityScene::from_file(&file).input(format!("validating {}", path.display()))
}

fn read_map(path: &Path) -> Result<InstanceMap, Failure> {
    let file: InstanceMapFile = serde_json::from_reader(open(path)?).input(format!("parsing {}", path.display()))?;
    InstanceMap::from_file(&file).input(format!("validating {}", path.display()))
}

fn read_coords(path: &Path) -> Result<SceneCoordinateImage, Failure> {
    SceneCoordinateImage::read_from(open(path)?).input(format!("reading {}", path.display()))
}

fn read_labels(path: &Path) -> Result<LabelImage, Failure> {
    LabelImage::read_from(open(path)?).input(format!("reading {}", path.display()))
}

fn write_coords(path: &Path, img: &SceneCoordinateImage) -> Result<(), Failure> {
    let mut w = create(path)?;
    img.write_to(&mut w)
        .and_then(|_| w.flush())
        .output(format!("writing {}", path.display()))
}

fn write_labels(path: &Path, img: &LabelImage) -> Result<(), Failure> {
    let mut w = create(path)?;
    img.write_to(&mut w)
        .and_then(|_| w.flush())
        .output(format!("writing {}", path.display()))
}

/// Frame ids in `dir` having a file with `suffix`, sorted.
fn list_frames(dir: &Path, suffix: &str) -> Result<Vec<String>, Failure> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).input(format!("listing {}", dir.display()))? {
        let name = entry.input(format!("listing {}", dir.display()))?.file_name();
        if let Some(frame) = name.to_str().and_then(|n| n.strip_suffix(suffix)) {
            out.push(frame.to_string());
        }
    }
    out.sort();
    Ok(out)
}

/// FNV-1a of the frame id: noise streams follow the frame, not its position.
fn frame_key(frame: &str) -> u64 {
    frame
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn generate(common: &Common, a: GenerateArgs) -> Result<(), Failure> {
    let preset = match a.preset.as_deref().unwrap_or("small") {
        "small" => CityPreset::small(),
        "large" => CityPreset::large(),
        other => return Err(bad_input(format!("unknown preset {other:?}"))),
    };
    let n = a.buildings.unwrap_or(preset.buildings);
    let scene = generate_city(n, preset.grid, preset.sizes, common.seed).input("generating city")?;
    let traj = TrajectoryConfig {
        count: a.frames.unwrap_or(100),
        seed: common.seed,
        ..Default::default()
    };
    let poses = sample_trajectory(&scene, &traj).input("sampling trajectory")?;
    write_json(&common.out.join("scene.json"), &scene.to_file())?;
    let mut w = create(&common.out.join("poses.jsonl"))?;
    write_poses(&poses, &mut w).and_then(|_| w.flush()).output("writing poses.jsonl")?;
    if let Some(spacing) = a.cloud_spacing {
        if !(spacing > 0.0) {
            return Err(bad_input("--cloud-spacing must be positive"));
        }
        let cloud = sample_surface_cloud(&scene, spacing);
        let mut w = create(&common.out.join("cloud.ply"))?;
        write_ply(&cloud, &mut w).and_then(|_| w.flush()).output("writing cloud.ply")?;
    }
    write_json(
        &common.out.join("generate.json"),
        &json!({
            "seed": common.seed,
            "preset": a.preset.as_deref().unwrap_or("small"),
            "buildings": scene.buildings.len(),
            "frames": poses.len(),
            "cloud_spacing": a.cloud_spacing,
        }),
    )?;
    println!(
        "{} buildings, {} road segments, {} poses",
        scene.buildings.len(),
        scene.road_segments,
        poses.len()
    );
    Ok(())
}

pub fn render(common: &Common, a: RenderArgs) -> Result<(), Failure> {
    let scene_path = a.scene.unwrap_or_else(|| common.out.join("scene.json"));
    let scene = read_scene(&scene_path)?;
    let poses_path = required(a.poses, "poses")?;
    let poses = read_poses(open(&poses_path)?).input(format!("reading {}", poses_path.display()))?;
    let width = a.width.unwrap_or(512);
    let dims = ImageDims::new(width, width / 2).input("image size")?;
    poses.par_iter().try_for_each(|(frame, pose)| {
        let r = raycast_render(&scene, pose, dims);
        write_coords(&common.out.join(gt_coords_name(frame)), &r.coords)?;
        write_labels(&common.out.join(gt_labels_name(frame)), &r.labels)
    })?;
    write_json(
        &common.out.join("render.json"),
        &json!({
            "seed": common.seed,
            "scene": scene_path,
            "frames": poses.len(),
            "width": dims.width,
            "height": dims.height,
        }),
    )?;
    println!("rendered {} frames at {}x{}", poses.len(), dims.width, dims.height);
    Ok(())
}

pub fn fit_map(common: &Common, a: FitMapArgs) -> Result<(), Failure> {
    let source = match (&a.frames, &a.ply) {
        (Some(dir), None) => json!({ "frames": dir }),
        (None, Some(ply)) => json!({ "ply": ply }),
        _ => return Err(bad_input("give exactly one of --frames or --ply")),
    };
    let points: Vec<(Vec3, LabelId)> = match (a.frames, a.ply) {
        (Some(dir), None) => {
            let mut pts = Vec::new();
            for frame in list_frames(&dir, GT_COORDS_SUFFIX)? {
                let coords = read_coords(&dir.join(gt_coords_name(&frame)))?;
                let labels = read_labels(&dir.join(gt_labels_name(&frame)))?;
                if coords.dims() != labels.dims() {
                    return Err(bad_input(format!("frame {frame}: coordinate and label sizes differ")));
                }
                for i in 0..coords.dims().pixel_count() {
                    let l = labels.get(i);
                    if let (true, Some(s)) = (is_building(l), coords.get(i)) {
                        pts.push((s, l));
                    }
                }
            }
            pts
        }
        (None, Some(ply)) => read_ply(open(&ply)?).input(format!("reading {}", ply.display()))?,
        _ => unreachable!("checked above"),
    };
    let build = build_instance_map(points.iter().map(|(p, l)| (p, *l)));
    for (label, count) in &build.skipped {
        eprintln!("skipped instance {label}: {count} points");
    }
    write_json(&common.out.join("map.json"), &build.map.to_file())?;
    let skipped: BTreeMap<String, usize> = build.skipped.iter().map(|(l, n)| (l.to_string(), *n)).collect();
    write_json(
        &common.out.join("fit_map.json"),
        &json!({
            "seed": common.seed,
            "source": source,
            "points": points.len(),
            "instances": build.map.len(),
            "skipped": skipped,
        }),
    )?;
    println!("{} instances, {} skipped", build.map.len(), build.skipped.len());
    Ok(())
}

fn volume_from_frames(dir: &Path, frames: &[String]) -> Result<Aabb, Failure> {
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for frame in frames {
        let coords = read_coords(&dir.join(gt_coords_name(frame)))?;
        for i in 0..coords.dims().pixel_count() {
            if let Some(s) = coords.get(i) {
                min = min.inf(&s);
                max = max.sup(&s);
            }
        }
    }
    if !(min.x <= max.x) {
        return Err(bad_input("no valid ground-truth coordinates to bound the outlier volume"));
    }
    Ok(Aabb { min, max }.inflated(OUTLIER_VOLUME_SCALE))
}

pub fn predict_sim(common: &Common, a: PredictArgs) -> Result<(), Failure> {
    let dir = required(a.frames, "frames")?;
    let map = read_map(&required(a.map, "map")?)?;
    let nm = NoiseModel {
        coord_sigma: a.sigma.unwrap_or(0.0),
        outlier_rate: a.outlier_rate.unwrap_or(0.0),
        label_flip_rate: a.flip_rate.unwrap_or(0.0),
        seed: common.seed,
    };
    nm.validate().input("noise model")?;
    let frames = list_frames(&dir, GT_COORDS_SUFFIX)?;
    let volume = match &a.scene {
        Some(p) => read_scene(p)?.bounds().inflated(OUTLIER_VOLUME_SCALE),
        None => volume_from_frames(&dir, &frames)?,
    };
    frames.par_iter().try_for_each(|frame| {
        let coords = read_coords(&dir.join(gt_coords_name(frame)))?;
        let labels = read_labels(&dir.join(gt_labels_name(frame)))?;
        let pred = simulate_predictions(&coords, &labels, &nm, &map, &volume, frame_key(frame))
            .input(format!("frame {frame}"))?;
        write_coords(&common.out.join(pred_coords_name(frame)), &pred.coords)?;
        write_labels(&common.out.join(pred_labels_name(frame)), &pred.labels)?;
        write_coords(&common.out.join(pred_local_name(frame)), &pred.local)
    })?;
    write_json(
        &common.out.join("predict.json"),
        &json!({
            "seed": common.seed,
            "frames": frames.len(),
            "noise": nm,
            "outlier_volume": { "min": [volume.min.x, volume.min.y, volume.min.z],
                                "max": [volume.max.x, volume.max.y, volume.max.z] },
        }),
    )?;
    println!("simulated predictions for {} frames", frames.len());
    Ok(())
}

pub fn localize(common: &Common, a: LocalizeArgs) -> Result<(), Failure> {
    let dir = required(a.frames, "frames")?;
    let map = read_map(&required(a.map, "map")?)?;
    let use_local = match a.source.as_deref().unwrap_or("local") {
        "local" => true,
        "coords" => false,
        other => return Err(bad_input(format!("unknown --source {other:?}"))),
    };
    let defaults = RansacConfig::default();
    let cfg = LocalizeConfig {
        ransac: RansacConfig {
            iterations: a.iterations.unwrap_or(defaults.iterations),
            inlier_threshold_deg: a.threshold_deg.unwrap_or(defaults.inlier_threshold_deg),
            seed: common.seed,
            ..defaults
        },
        max_correspondences: a.max_correspondences.unwrap_or(LocalizeConfig::default().max_correspondences),
    };
    cfg.ransac.validate().input("RANSAC settings")?;
    let frames = list_frames(&dir, PRED_LABELS_SUFFIX)?;
    let records = frames
        .par_iter()
        .map(|frame| -> Result<EstimateRecord, Failure> {
            let labels = read_labels(&dir.join(pred_labels_name(frame)))?;
            let bearings = bearings_for(labels.dims());
            let corrs = if use_local {
                let local = read_coords(&dir.join(pred_local_name(frame)))?;
                correspondences_from_local(&local, &labels, &map, &bearings)
            } else {
                let coords = read_coords(&dir.join(pred_coords_name(frame)))?;
                correspondences_from_coords(&coords, &labels, &bearings)
            };
            Ok(match localize_correspondences(&corrs, &cfg) {
                Ok(est) => EstimateRecord::success(frame, &est),
                Err(PnpError::NoConsensus { best }) => EstimateRecord::failure(
                    frame,
                    "no consensus",
                    best.map_or(0, |b| b.inlier_indices.len()),
                ),
                Err(e) => EstimateRecord::failure(frame, &e.to_string(), 0),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = create(&common.out.join("estimates.jsonl"))?;
    write_jsonl(&records, &mut w).and_then(|_| w.flush()).output("writing estimates.jsonl")?;
    let failed = records.iter().filter(|r| r.failed.is_some()).count();
    write_json(
        &common.out.join("localize.json"),
        &json!({
            "seed": common.seed,
            "iterations": cfg.ransac.iterations,
            "inlier_threshold_deg": cfg.ransac.inlier_threshold_deg,
            "max_correspondences": cfg.max_correspondences,
            "source": if use_local { "local" } else { "coords" },
            "frames": records.len(),
            "failed": failed,
        }),
    )?;
    println!("localised {} of {} frames", records.len() - failed, records.len());
    if !records.is_empty() && failed == records.len() {
        return Err(Failure::NoConsensus(records.len()));
    }
    Ok(())
}

pub fn evaluate(common: &Common, a: EvaluateArgs) -> Result<(), Failure> {
    let est_path = required(a.estimates, "estimates")?;
    let estimates: Vec<EstimateRecord> =
        read_jsonl(open(&est_path)?).input(format!("reading {}", est_path.display()))?;
    let gt_path = required(a.poses, "poses")?;
    let truth: BTreeMap<String, Pose> = read_poses(open(&gt_path)?)
        .input(format!("reading {}", gt_path.display()))?
        .into_iter()
        .collect();
    let mut errors = Vec::new();
    let mut failed = 0;
    for rec in &estimates {
        let gt = truth
            .get(&rec.frame)
            .ok_or_else(|| bad_input(format!("frame {} has no ground-truth pose", rec.frame)))?;
        match rec.pose() {
            Some(p) => errors.push(relative_pose_errors(&p.input(format!("frame {}", rec.frame))?, gt)),
            None => failed += 1,
        }
    }
    let extra = a.percentiles.unwrap_or_default();
    let pose = if errors.is_empty() {
        None
    } else {
        Some(pose_metrics(&errors, &extra).input("percentiles")?)
    };
    let (dist_curve, angle_curve) = error_curves(&errors);
    std::fs::write(common.out.join("dist_curve.csv"), curve_csv(&dist_curve)).output("writing dist_curve.csv")?;
    std::fs::write(common.out.join("angle_curve.csv"), curve_csv(&angle_curve)).output("writing angle_curve.csv")?;

    let (mut coord, mut coord_buildings) = (None, None);
    if let Some(dir) = a.frames {
        let gt_dir = a.gt_frames.unwrap_or_else(|| dir.clone());
        let roc_max = a.roc_max.unwrap_or(5.0);
        if !(roc_max > 0.0 && roc_max.is_finite()) {
            return Err(bad_input("--roc-max must be positive"));
        }
        let mut all = CoordTally::default();
        let mut buildings = CoordTally::default();
        let mut roc = RocTally::new(&threshold_grid(roc_max, 20)).input("accuracy curve")?;
        for frame in list_frames(&gt_dir, GT_COORDS_SUFFIX)? {
            let gt = read_coords(&gt_dir.join(gt_coords_name(&frame)))?;
            let labels = read_labels(&gt_dir.join(gt_labels_name(&frame)))?;
            let pred = read_coords(&dir.join(pred_coords_name(&frame)))?;
            all.add_image(&pred, &gt, |_| true).input(format!("frame {frame}"))?;
            buildings
                .add_image(&pred, &gt, |i| is_building(labels.get(i)))
                .input(format!("frame {frame}"))?;
            roc.add_image(&pred, &gt, |_| true).input(format!("frame {frame}"))?;
        }
        coord = all.metrics().ok();
        coord_buildings = buildings.metrics().ok();
        if let Ok(curve) = roc.curve() {
            let mut csv = String::from("threshold,pct\n");
            for p in curve {
                csv.push_str(&format!("{},{}\n", p.threshold, p.pct));
            }
            std::fs::write(common.out.join("roc.csv"), csv).output("writing roc.csv")?;
        }
    }
    write_json(
        &common.out.join("evaluate.json"),
        &json!({ "seed": common.seed, "estimates": est_path, "poses": gt_path, "percentiles": extra }),
    )?;
    let report = Report {
        coord,
        coord_buildings,
        pose,
        frames: estimates.len(),
        failed_frames: failed,
        conventions: Conventions::default(),
    };
    write_json(&common.out.join("report.json"), &report)?;
    if let Some(p) = &report.pose {
        println!(
            "median {:.4} m / {:.4} deg over {} frames ({} failed)",
            p.median_dist, p.median_angle, p.n, failed
        );
    } else {
        println!("no localised frames ({failed} failed)");
    }
    Ok(())
}
