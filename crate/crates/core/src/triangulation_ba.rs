//! Global triangulation from averaged poses and cluster-partitioned bundle
//! adjustment.
//!
//! The distributed solver is block-coordinate descent: every independent
//! cluster is a sub-problem over its own cameras and the points it alone
//! observes, while points seen from several clusters are held fixed and
//! re-estimated in a sequential consensus step. Both steps never increase
//! the total reprojection cost.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ba::{reprojection_residual, BaCamera, BaPoint, BaProblem, LmConfig, Observation};
use crate::clustering::Cluster;
use crate::geometry::{max_reprojection_error, triangulate_dlt, View};
use crate::local_sfm::LocalReconstruction;
use crate::scene::{CameraId, Intrinsics, Pose, SceneError};
use crate::tracks::{Track, TrackElement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Rejection {
    InsufficientViews,
    Degenerate,
    Cheirality,
    Reprojection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "state", content = "reason")]
pub enum PointStatus {
    Active,
    Rejected(Rejection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct GlobalPoint {
    pub track_id: usize,
    pub position: Vector3<f64>,
    /// Independent cluster holding the plurality of the observations.
    pub cluster_id: usize,
    /// `[camera, feature, x, y]` per observation.
    #[serde(with = "crate::tracks::element_tuples")]
    pub observations: Vec<TrackElement>,
    pub status: PointStatus,
}

impl GlobalPoint {
    pub fn is_active(&self) -> bool {
        self.status == PointStatus::Active
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TriangulationConfig {
    pub min_views: usize,
    pub max_reprojection_px: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_views: 3,
            max_reprojection_px: 4.0,
        }
    }
}

/// Restricts every track to the observations kept by at least one local
/// reconstruction. Tracks left with no observation are dropped.
pub fn validated_tracks(tracks: &[Track], reconstructions: &[LocalReconstruction]) -> Vec<Track> {
    let mut kept: BTreeMap<usize, BTreeSet<(CameraId, u32)>> = BTreeMap::new();
    for rec in reconstructions {
        for p in &rec.points {
            kept.entry(p.track).or_default().extend(p.observations.iter().map(|o| (o.camera, o.feature)));
        }
    }
    tracks
        .iter()
        .filter_map(|t| {
            let keys = kept.get(&t.id)?;
            let elements: Vec<TrackElement> = t.elements.iter().filter(|e| keys.contains(&(e.camera, e.feature))).copied().collect();
            (!elements.is_empty()).then_some(Track { id: t.id, elements })
        })
        .collect()
}

/// Camera to independent-cluster map.
pub fn camera_owner(independent: &[Cluster]) -> BTreeMap<CameraId, usize> {
    independent.iter().flat_map(|c| c.cameras.iter().map(move |&cam| (cam, c.id))).collect()
}

fn plurality_owner(observations: &[TrackElement], owner: &BTreeMap<CameraId, usize>) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for o in observations {
        if let Some(&k) = owner.get(&o.camera) {
            *counts.entry(k).or_default() += 1;
        }
    }
    // BTreeMap order makes the lowest id win ties
    counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map_or(usize::MAX, |(&k, _)| k)
}

/// Multi-view linear triangulation of every track from global poses. Rejected
/// tracks are returned with their reason.
pub fn triangulate_global(
    tracks: &[Track],
    poses: &BTreeMap<CameraId, Pose>,
    intrinsics: &[Intrinsics],
    independent: &[Cluster],
    config: &TriangulationConfig,
) -> Vec<GlobalPoint> {
    let owner = camera_owner(independent);
    tracks
        .par_iter()
        .map(|t| {
            let observations: Vec<TrackElement> = t.elements.iter().filter(|e| poses.contains_key(&e.camera)).copied().collect();
            let cluster_id = plurality_owner(&observations, &owner);
            let mut point = GlobalPoint {
                track_id: t.id,
                position: Vector3::zeros(),
                cluster_id,
                observations,
                status: PointStatus::Active,
            };
            point.status = match triangulate_observations(&point.observations, poses, intrinsics, config) {
                Ok(x) => {
                    point.position = x;
                    PointStatus::Active
                }
                Err(r) => PointStatus::Rejected(r),
            };
            point
        })
        .collect()
}

fn views_of<'a>(observations: &[TrackElement], poses: &'a BTreeMap<CameraId, Pose>, intrinsics: &'a [Intrinsics]) -> Vec<View<'a>> {
    observations
        .iter()
        .map(|o| View {
            pose: &poses[&o.camera],
            intrinsics: &intrinsics[o.camera],
            pixel: o.point,
        })
        .collect()
}

fn triangulate_observations(
    observations: &[TrackElement],
    poses: &BTreeMap<CameraId, Pose>,
    intrinsics: &[Intrinsics],
    config: &TriangulationConfig,
) -> Result<Vector3<f64>, Rejection> {
    if observations.len() < config.min_views {
        return Err(Rejection::InsufficientViews);
    }
    let views = views_of(observations, poses, intrinsics);
    let x = triangulate_dlt(&views).map_err(|_| Rejection::Degenerate)?;
    let err = max_reprojection_error(&x, &views).ok_or(Rejection::Cheirality)?;
    if err > config.max_reprojection_px {
        return Err(Rejection::Reprojection);
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct BundleConfig {
    pub rounds: usize,
    /// Stop when the RMS improves by less than this between rounds (pixels).
    pub rms_tolerance: f64,
    pub lm: LmConfig,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            rms_tolerance: 1e-6,
            lm: LmConfig::default(),
        }
    }
}

/// Sub-problem of one independent cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct BaPartition {
    pub cluster: usize,
    pub cameras: Vec<CameraId>,
    /// Active points observed only by this partition.
    pub interior: Vec<usize>,
    /// Indices of (point, observation) pairs made by this partition's cameras.
    pub observations: Vec<(usize, usize)>,
}

/// Splits the active points into partitions by the observing camera's
/// independent cluster. Returns the partitions and the boundary points
/// (observed from more than one partition).
pub fn build_partitions(points: &[GlobalPoint], poses: &BTreeMap<CameraId, Pose>, independent: &[Cluster]) -> (Vec<BaPartition>, Vec<usize>) {
    let owner = camera_owner(independent);
    let mut parts: Vec<BaPartition> = independent
        .iter()
        .map(|c| BaPartition {
            cluster: c.id,
            cameras: c.cameras.iter().copied().filter(|cam| poses.contains_key(cam)).collect(),
            interior: Vec::new(),
            observations: Vec::new(),
        })
        .collect();
    let slot: BTreeMap<usize, usize> = independent.iter().enumerate().map(|(s, c)| (c.id, s)).collect();
    let mut boundary = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        if !p.is_active() {
            continue;
        }
        let mut seen = BTreeSet::new();
        for (oi, o) in p.observations.iter().enumerate() {
            let Some(&k) = owner.get(&o.camera) else { continue };
            parts[slot[&k]].observations.push((pi, oi));
            seen.insert(k);
        }
        if seen.len() > 1 {
            boundary.push(pi);
        } else if let Some(&k) = seen.first() {
            parts[slot[&k]].interior.push(pi);
        }
    }
    (parts, boundary)
}

/// Total squared reprojection error over all active observations.
pub fn total_cost(points: &[GlobalPoint], poses: &BTreeMap<CameraId, Pose>, intrinsics: &[Intrinsics]) -> (f64, usize) {
    let mut cost = 0.0;
    let mut n = 0;
    for p in points.iter().filter(|p| p.is_active()) {
        cost += point_cost(&p.position, &p.observations, poses, intrinsics);
        n += p.observations.len();
    }
    (cost, n)
}

fn point_cost(x: &Vector3<f64>, observations: &[TrackElement], poses: &BTreeMap<CameraId, Pose>, intrinsics: &[Intrinsics]) -> f64 {
    observations
        .iter()
        .map(|o| reprojection_residual(&poses[&o.camera], &intrinsics[o.camera], x, &o.point).map_or(f64::INFINITY, |r| r.norm_squared()))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoundRecord {
    pub round: usize,
    pub cost: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleOutcome {
    pub poses: BTreeMap<CameraId, Pose>,
    pub points: Vec<GlobalPoint>,
    /// Round 0 is the initial state.
    pub rounds: Vec<RoundRecord>,
    /// `(round, cluster)` of partitions whose solve was rolled back.
    pub rolled_back: Vec<(usize, usize)>,
}

struct PartitionResult {
    poses: Vec<(CameraId, Pose)>,
    points: Vec<(usize, Vector3<f64>)>,
    rolled_back: bool,
}

fn solve_partition(
    part: &BaPartition,
    points: &[GlobalPoint],
    poses: &BTreeMap<CameraId, Pose>,
    intrinsics: &[Intrinsics],
    gauge: CameraId,
    lm: &LmConfig,
) -> PartitionResult {
    let cam_slot: BTreeMap<CameraId, usize> = part.cameras.iter().enumerate().map(|(s, &c)| (c, s)).collect();
    let interior: BTreeSet<usize> = part.interior.iter().copied().collect();
    let mut point_slot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut problem = BaProblem {
        cameras: part
            .cameras
            .iter()
            .map(|&c| if c == gauge { BaCamera::fixed(poses[&c], intrinsics[c]) } else { BaCamera::free(poses[&c], intrinsics[c]) })
            .collect(),
        points: Vec::new(),
        observations: Vec::new(),
    };
    let mut order = Vec::new();
    for &(pi, oi) in &part.observations {
        let s = *point_slot.entry(pi).or_insert_with(|| {
            problem.points.push(BaPoint {
                position: points[pi].position,
                fixed: !interior.contains(&pi),
            });
            order.push(pi);
            problem.points.len() - 1
        });
        let o = &points[pi].observations[oi];
        problem.observations.push(Observation {
            camera: cam_slot[&o.camera],
            point: s,
            pixel: o.point,
        });
    }
    let report = problem.solve(lm);
    if !(report.final_cost <= report.initial_cost) {
        return PartitionResult {
            poses: Vec::new(),
            points: Vec::new(),
            rolled_back: true,
        };
    }
    PartitionResult {
        poses: part.cameras.iter().zip(&problem.cameras).map(|(&c, cam)| (c, cam.pose)).collect(),
        points: order
            .iter()
            .zip(&problem.points)
            .filter(|(pi, _)| interior.contains(pi))
            .map(|(&pi, p)| (pi, p.position))
            .collect(),
        rolled_back: false,
    }
}

/// Best position for one point with all cameras fixed: the better of the
/// refined current value and the refined re-triangulation. `None` if neither
/// lowers the point's cost.
fn consensus_point(point: &GlobalPoint, poses: &BTreeMap<CameraId, Pose>, intrinsics: &[Intrinsics], lm: &LmConfig) -> Option<Vector3<f64>> {
    let current = point_cost(&point.position, &point.observations, poses, intrinsics);
    let refine = |start: Vector3<f64>| -> (f64, Vector3<f64>) {
        let cams: Vec<CameraId> = point.observations.iter().map(|o| o.camera).collect();
        let mut problem = BaProblem {
            cameras: cams.iter().map(|&c| BaCamera::fixed(poses[&c], intrinsics[c])).collect(),
            points: vec![BaPoint { position: start, fixed: false }],
            observations: point
                .observations
                .iter()
                .enumerate()
                .map(|(s, o)| Observation {
                    camera: s,
                    point: 0,
                    pixel: o.point,
                })
                .collect(),
        };
        let report = problem.solve(lm);
        (report.final_cost, problem.points[0].position)
    };
    let mut best = refine(point.position);
    if let Ok(x) = triangulate_dlt(&views_of(&point.observations, poses, intrinsics)) {
        let alt = refine(x);
        if alt.0 < best.0 {
            best = alt;
        }
    }
    (best.0 < current).then_some(best.1)
}

/// Cluster-partitioned bundle adjustment. The lowest posed camera is held
/// fixed as gauge. The total cost is non-increasing across rounds.
pub fn distributed_bundle_adjust(
    poses: &BTreeMap<CameraId, Pose>,
    points: &[GlobalPoint],
    intrinsics: &[Intrinsics],
    independent: &[Cluster],
    config: &BundleConfig,
) -> BundleOutcome {
    let mut poses = poses.clone();
    let mut points = points.to_vec();
    let (parts, boundary) = build_partitions(&points, &poses, independent);
    let gauge = poses.keys().next().copied().unwrap_or(usize::MAX);
    let record = |round: usize, points: &[GlobalPoint], poses: &BTreeMap<CameraId, Pose>| {
        let (cost, n) = total_cost(points, poses, intrinsics);
        RoundRecord {
            round,
            cost,
            rms: if n == 0 { 0.0 } else { (cost / n as f64).sqrt() },
        }
    };
    let mut rounds = vec![record(0, &points, &poses)];
    let mut rolled_back = Vec::new();
    for round in 1..=config.rounds {
        let results: Vec<PartitionResult> = parts
            .par_iter()
            .map(|part| solve_partition(part, &points, &poses, intrinsics, gauge, &config.lm))
            .collect();
        for (part, res) in parts.iter().zip(results) {
            if res.rolled_back {
                warn!("round {round}: partition {} diverged and was rolled back", part.cluster);
                rolled_back.push((round, part.cluster));
                continue;
            }
            poses.extend(res.poses);
            for (pi, x) in res.points {
                points[pi].position = x;
            }
        }
        let updates: Vec<(usize, Option<Vector3<f64>>)> = boundary
            .par_iter()
            .map(|&pi| (pi, consensus_point(&points[pi], &poses, intrinsics, &config.lm)))
            .collect();
        for (pi, x) in updates {
            if let Some(x) = x {
                points[pi].position = x;
            }
        }
        let rec = record(round, &points, &poses);
        let prev = rounds.last().expect("initial record").rms;
        debug!("round {round}: cost {:.6e}, rms {:.6} px", rec.cost, rec.rms);
        rounds.push(rec);
        if prev - rec.rms < config.rms_tolerance {
            break;
        }
    }
    BundleOutcome {
        poses,
        points,
        rounds,
        rolled_back,
    }
}

pub fn write_round_log(path: &Path, rounds: &[RoundRecord]) -> Result<(), SceneError> {
    let mut out = String::from("round,cost,rms_px\n");
    for r in rounds {
        out.push_str(&format!("{},{:e},{}\n", r.round, r.cost, r.rms));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Pixel of observation `o` under the given pose, for diagnostics.
pub fn project_observation(pose: &Pose, k: &Intrinsics, x: &Vector3<f64>, o: &TrackElement) -> Option<Point2<f64>> {
    reprojection_residual(pose, k, x, &o.point).map(|r| Point2::new(o.point.x + r.x, o.point.y + r.y))
}
