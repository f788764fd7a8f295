//! On-disk record formats: pose and estimate JSON Lines, ASCII PLY clouds
//! and per-frame image file names.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose, Vec3};
use crate::labels::LabelId;
use crate::pnp::PoseEstimate;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {source}")]
    Pose { line: usize, source: GeometryError },
    #[error("ply: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One line of a pose file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: String,
    /// Rotation as `[w, x, y, z]` with `w >= 0`.
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl PoseRecord {
    pub fn new(frame: &str, pose: &Pose) -> Self {
        let t = pose.translation;
        Self {
            frame: frame.to_string(),
            q: pose.quaternion_wxyz(),
            t: [t.x, t.y, t.z],
        }
    }

    pub fn pose(&self) -> Result<Pose, GeometryError> {
        Pose::from_quaternion_wxyz(self.q, self.t)
    }
}

/// One line of an estimate file; failed frames carry `failed` instead of a pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub frame: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<[f64; 3]>,
    pub inliers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_residual_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

impl EstimateRecord {
    pub fn success(frame: &str, est: &PoseEstimate) -> Self {
        let r = PoseRecord::new(frame, &est.pose);
        Self {
            frame: frame.to_string(),
            q: Some(r.q),
            t: Some(r.t),
            inliers: est.inlier_indices.len(),
            mean_residual_deg: Some(est.mean_inlier_angle),
            failed: None,
        }
    }

    pub fn failure(frame: &str, reason: &str, inliers: usize) -> Self {
        Self {
            frame: frame.to_string(),
            q: None,
            t: None,
            inliers,
            mean_residual_deg: None,
            failed: Some(reason.to_string()),
        }
    }

    /// The estimated pose, or `None` for a failed frame.
    pub fn pose(&self) -> Option<Result<Pose, GeometryError>> {
        match (self.q, self.t) {
            (Some(q), Some(t)) => Some(Pose::from_quaternion_wxyz(q, t)),
            _ => None,
        }
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(records: &[T], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| FormatError::Json { line: k + 1, source })?);
    }
    Ok(out)
}

/// Read a pose file into `(frame, pose)` pairs.
pub fn read_poses<R: BufRead>(r: R) -> Result<Vec<(String, Pose)>, FormatError> {
    read_jsonl::<PoseRecord, _>(r)?
        .into_iter()
        .enumerate()
        .map(|(k, rec)| {
            let pose = rec.pose().map_err(|source| FormatError::Pose { line: k + 1, source })?;
            Ok((rec.frame, pose))
        })
        .collect()
}

pub fn write_poses<W: Write>(poses: &[(String, Pose)], w: W) -> io::Result<()> {
    let recs: Vec<PoseRecord> = poses.iter().map(|(f, p)| PoseRecord::new(f, p)).collect();
    write_jsonl(&recs, w)
}

/// ASCII PLY with `x y z` (float) and `instance_label` (uint) per vertex.
pub fn write_ply<W: Write>(points: &[(Vec3, LabelId)], mut w: W) -> io::Result<()> {
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uint instance_label\nend_header\n",
        points.len()
    )?;
    for (p, l) in points {
        writeln!(w, "{} {} {} {}", p.x as f32, p.y as f32, p.z as f32, l)?;
    }
    Ok(())
}

/// Parse an ASCII PLY vertex list. Extra vertex properties are ignored;
/// elements after the vertex block are not read.
pub fn read_ply<R: BufRead>(r: R) -> Result<Vec<(Vec3, LabelId)>, FormatError> {
    let bad = |m: &str| FormatError::Ply(m.to_string());
    let mut lines = r.lines();
    let mut next = || -> Result<Option<String>, FormatError> { Ok(lines.next().transpose()?) };
    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut vertices: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let line = next()?.ok_or_else(|| bad("unterminated header"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(bad("only ascii PLY is supported")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertices = Some(count.parse().map_err(|_| bad("bad vertex count"))?);
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties on vertices")),
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            _ => return Err(FormatError::Ply(format!("unexpected header line {line:?}"))),
        }
    }
    let n = vertices.ok_or_else(|| bad("no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| FormatError::Ply(format!("missing property {name}")))
    };
    let (ix, iy, iz, il) = (col("x")?, col("y")?, col("z")?, col("instance_label")?);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let line = next()?.ok_or_else(|| bad("truncated vertex list"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != props.len() {
            return Err(FormatError::Ply(format!("vertex {k}: expected {} values", props.len())));
        }
        let f = |i: usize| tok[i].parse::<f32>().map(f64::from).map_err(|_| FormatError::Ply(format!("vertex {k}: bad number")));
        let label = tok[il]
            .parse::<LabelId>()
            .map_err(|_| FormatError::Ply(format!("vertex {k}: bad label")))?;
        out.push((Vec3::new(f(ix)?, f(iy)?, f(iz)?), label));
    }
    Ok(out)
}

pub fn gt_coords_name(frame: &str) -> String {
    format!("{frame}.gt.scrd")
}

pub fn gt_labels_name(frame: &str) -> String {
    format!("{frame}.gt.lbls")
}

pub fn pred_coords_name(frame: &str) -> String {
    format!("{frame}.pred.scrd")
}

pub fn pred_labels_name(frame: &str) -> String {
    format!("{frame}.pred.lbls")
}

pub fn pred_local_name(frame: &str) -> String {
    format!("{frame}.pred_local.scrd")
}
