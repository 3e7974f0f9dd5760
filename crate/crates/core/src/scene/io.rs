//! File formats: versioned match-graph JSON, ground-truth poses, ASCII PLY.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use super::{CameraId, Correspondence, Intrinsics, MatchEdge, Pose, SceneError};

pub const MATCH_GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct MatchGraphFile {
    pub version: u32,
    pub num_cameras: usize,
    pub intrinsics: Vec<Intrinsics>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub i: CameraId,
    pub j: CameraId,
    /// `[fi, xi, yi, fj, xj, yj]`
    pub pairs: Vec<[f64; 6]>,
}

impl MatchGraphFile {
    pub fn new(intrinsics: Vec<Intrinsics>, matches: &[MatchEdge]) -> Self {
        let edges = matches
            .iter()
            .map(|m| EdgeRecord {
                i: m.i,
                j: m.j,
                pairs: m
                    .correspondences
                    .iter()
                    .map(|c| {
                        [
                            c.feature_i as f64,
                            c.point_i.x,
                            c.point_i.y,
                            c.feature_j as f64,
                            c.point_j.x,
                            c.point_j.y,
                        ]
                    })
                    .collect(),
            })
            .collect();
        Self {
            version: MATCH_GRAPH_VERSION,
            num_cameras: intrinsics.len(),
            intrinsics,
            edges,
        }
    }

    /// Validates the header and converts edge records into match edges.
    pub fn into_parts(self) -> Result<(Vec<Intrinsics>, Vec<MatchEdge>), SceneError> {
        if self.version != MATCH_GRAPH_VERSION {
            return Err(SceneError::Format(format!(
                "unsupported match-graph version {}",
                self.version
            )));
        }
        if self.intrinsics.len() != self.num_cameras {
            return Err(SceneError::Format(format!(
                "header lists {} cameras but {} intrinsics",
                self.num_cameras,
                self.intrinsics.len()
            )));
        }
        for k in &self.intrinsics {
            k.validate()?;
        }
        let mut matches = Vec::with_capacity(self.edges.len());
        for e in self.edges {
            let mut correspondences = Vec::with_capacity(e.pairs.len());
            for p in e.pairs {
                correspondences.push(Correspondence {
                    feature_i: feature_index(p[0])?,
                    point_i: Point2::new(p[1], p[2]),
                    feature_j: feature_index(p[3])?,
                    point_j: Point2::new(p[4], p[5]),
                });
            }
            let edge = MatchEdge {
                i: e.i,
                j: e.j,
                correspondences,
            };
            edge.validate(self.num_cameras)?;
            matches.push(edge);
        }
        Ok((self.intrinsics, matches))
    }
}

fn feature_index(v: f64) -> Result<u32, SceneError> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(SceneError::Format(format!("invalid feature index {v}")))
    }
}

pub fn write_match_graph(path: &Path, intrinsics: &[Intrinsics], matches: &[MatchEdge]) -> Result<(), SceneError> {
    let file = MatchGraphFile::new(intrinsics.to_vec(), matches);
    write_json(path, &file)
}

pub fn read_match_graph(path: &Path) -> Result<(Vec<Intrinsics>, Vec<MatchEdge>), SceneError> {
    let file: MatchGraphFile = read_json(path)?;
    file.into_parts()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PoseRecord {
    pub camera_id: CameraId,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
}

impl PoseRecord {
    pub fn new(camera_id: CameraId, pose: &Pose) -> Self {
        let r = &pose.rotation;
        Self {
            camera_id,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            center: [pose.center.x, pose.center.y, pose.center.z],
        }
    }

    pub fn pose(&self) -> Result<Pose, SceneError> {
        Pose::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from_row_slice(&self.center),
        )
    }
}

pub fn write_ground_truth(path: &Path, poses: &[Pose]) -> Result<(), SceneError> {
    let records: Vec<_> = poses.iter().enumerate().map(|(id, p)| PoseRecord::new(id, p)).collect();
    write_json(path, &records)
}

/// Reads ground-truth poses, returned densely indexed by camera id.
pub fn read_ground_truth(path: &Path) -> Result<Vec<Option<Pose>>, SceneError> {
    let records: Vec<PoseRecord> = read_json(path)?;
    let n = records.iter().map(|r| r.camera_id + 1).max().unwrap_or(0);
    let mut poses = vec![None; n];
    for r in &records {
        if poses[r.camera_id].is_some() {
            return Err(SceneError::Format(format!("camera {} listed twice", r.camera_id)));
        }
        poses[r.camera_id] = Some(r.pose()?);
    }
    Ok(poses)
}

/// ASCII PLY with an optional uniform RGB color per vertex.
pub fn write_ply(path: &Path, points: &[Vector3<f64>], color: Option<[u8; 3]>) -> Result<(), SceneError> {
    let mut out = Vec::with_capacity(64 + points.len() * 40);
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", points.len())?;
    writeln!(out, "property double x")?;
    writeln!(out, "property double y")?;
    writeln!(out, "property double z")?;
    if color.is_some() {
        writeln!(out, "property uchar red")?;
        writeln!(out, "property uchar green")?;
        writeln!(out, "property uchar blue")?;
    }
    writeln!(out, "end_header")?;
    for p in points {
        match color {
            Some([r, g, b]) => writeln!(out, "{} {} {} {r} {g} {b}", p.x, p.y, p.z)?,
            None => writeln!(out, "{} {} {}", p.x, p.y, p.z)?,
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SceneError> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
