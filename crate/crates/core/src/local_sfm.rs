//! Incremental SfM inside one camera cluster and extraction of the cluster's
//! relative motions.
//!
//! The reconstruction lives in an arbitrary cluster frame: the seed camera is
//! the identity pose and the seed baseline has unit length.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use nalgebra::{Matrix3, Point2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ba::{BaCamera, BaPoint, BaProblem, LmConfig, LmReport, Observation};
use crate::clustering::Cluster;
use crate::geometry::{
    max_reprojection_error, ransac, recover_pose, reprojection_error, triangulate_checked, triangulation_angle, EssentialEstimator,
    RansacConfig, ResectionEstimator, TriangulationCheck, TriangulationError, View,
};
use crate::scene::io::PoseRecord;
use crate::scene::{CameraId, Intrinsics, Pose, SceneError};
use crate::tracks::{Track, TrackElement};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct LocalSfmConfig {
    /// Sampson threshold of the two-view RANSAC, in pixels.
    pub seed_threshold_px: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iterations: usize,
    pub min_seed_correspondences: usize,
    pub min_seed_median_angle_deg: f64,
    pub max_seed_attempts: usize,
    /// Reprojection threshold of the resection RANSAC, in pixels.
    pub resection_threshold_px: f64,
    pub min_registration_inliers: usize,
    pub min_inlier_ratio: f64,
    pub min_triangulation_angle_deg: f64,
    pub max_reprojection_px: f64,
    /// Bundle adjustment after every this many registrations.
    pub ba_every: usize,
    pub lm: LmConfig,
}

impl Default for LocalSfmConfig {
    fn default() -> Self {
        Self {
            seed_threshold_px: 2.0,
            ransac_confidence: 0.9999,
            ransac_max_iterations: 10_000,
            min_seed_correspondences: 16,
            min_seed_median_angle_deg: 2.0,
            max_seed_attempts: 30,
            resection_threshold_px: 4.0,
            min_registration_inliers: 12,
            min_inlier_ratio: 0.3,
            min_triangulation_angle_deg: 1.0,
            max_reprojection_px: 4.0,
            ba_every: 5,
            lm: LmConfig::default(),
        }
    }
}

impl LocalSfmConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let positive = [
            ("seed threshold", self.seed_threshold_px),
            ("resection threshold", self.resection_threshold_px),
            ("max reprojection", self.max_reprojection_px),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SceneError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ransac_confidence) {
            return Err(SceneError::Config(format!("RANSAC confidence must lie in [0, 1), got {}", self.ransac_confidence)));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) {
            return Err(SceneError::Config(format!("inlier ratio must lie in [0, 1], got {}", self.min_inlier_ratio)));
        }
        if self.ba_every == 0 || self.ransac_max_iterations == 0 || self.lm.max_iterations == 0 {
            return Err(SceneError::Config("BA cadence and iteration limits must be >= 1".into()));
        }
        if self.min_seed_correspondences < 8 || self.min_registration_inliers < 6 {
            return Err(SceneError::Config("minimal sample sizes are 8 (seed) and 6 (registration)".into()));
        }
        Ok(())
    }
}

/// A triangulated point of a cluster reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPoint {
    /// Global track id.
    pub track: usize,
    pub position: Vector3<f64>,
    /// Inlier observations, sorted by camera.
    pub observations: Vec<TrackElement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalReconstruction {
    pub cluster: usize,
    /// All cameras of the cluster, sorted.
    pub cameras: Vec<CameraId>,
    /// Registered cameras in the cluster frame.
    pub poses: BTreeMap<CameraId, Pose>,
    pub points: Vec<LocalPoint>,
    pub seed_pair: Option<(CameraId, CameraId)>,
    /// Set when the cluster could not be initialized.
    pub failure: Option<String>,
    /// Number of bundle adjustments stopped by the iteration limit.
    pub unconverged_ba: usize,
}

impl LocalReconstruction {
    pub fn is_failed(&self) -> bool {
        self.failure.is_some() || self.poses.len() < 2
    }

    pub fn registered(&self, camera: CameraId) -> bool {
        self.poses.contains_key(&camera)
    }

    /// Mean reprojection error over all inlier observations, in pixels.
    pub fn mean_reprojection_error(&self, intrinsics: &[Intrinsics]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in &self.points {
            for o in &p.observations {
                sum += reprojection_error(&self.poses[&o.camera], &intrinsics[o.camera], &o.point, &p.position);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Applies `X' = s Q X + d` to every pose and point.
    pub fn transformed(&self, scale: f64, q: &Matrix3<f64>, d: &Vector3<f64>) -> Self {
        let mut out = self.clone();
        for pose in out.poses.values_mut() {
            *pose = pose.transformed(scale, q, d);
        }
        for p in &mut out.points {
            p.position = scale * (q * p.position) + d;
        }
        out
    }
}

/// Relative motion of a camera pair observed in one cluster:
/// `R_ij = R_j R_iᵀ`, `t_ij = R_j (c_i - c_j)` in cluster units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeMotion {
    pub i: CameraId,
    pub j: CameraId,
    pub cluster: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Points observed by both cameras in the cluster.
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelativeMotionRecord {
    i: CameraId,
    j: CameraId,
    k: usize,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    t: [f64; 3],
    support: usize,
}

impl Serialize for RelativeMotion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        RelativeMotionRecord {
            i: self.i,
            j: self.j,
            k: self.cluster,
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            t: [self.translation.x, self.translation.y, self.translation.z],
            support: self.support,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RelativeMotion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = RelativeMotionRecord::deserialize(d)?;
        let rotation = Matrix3::from_row_slice(&r.rotation);
        if !crate::so3::is_rotation(&rotation, 1e-6) {
            return Err(serde::de::Error::custom(format!("motion ({}, {}) has an invalid rotation", r.i, r.j)));
        }
        Ok(Self {
            i: r.i,
            j: r.j,
            cluster: r.k,
            rotation,
            translation: Vector3::from_row_slice(&r.t),
            support: r.support,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PointRecord {
    track: usize,
    position: [f64; 3],
    observations: Vec<(CameraId, u32, f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ReconstructionRecord {
    cluster_id: usize,
    cameras: Vec<CameraId>,
    poses: Vec<PoseRecord>,
    points: Vec<PointRecord>,
    seed_pair: Option<(CameraId, CameraId)>,
    failure: Option<String>,
    unconverged_ba: usize,
}

impl Serialize for LocalReconstruction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ReconstructionRecord {
            cluster_id: self.cluster,
            cameras: self.cameras.clone(),
            poses: self.poses.iter().map(|(&id, p)| PoseRecord::new(id, p)).collect(),
            points: self
                .points
                .iter()
                .map(|p| PointRecord {
                    track: p.track,
                    position: [p.position.x, p.position.y, p.position.z],
                    observations: p.observations.iter().map(|e| (e.camera, e.feature, e.point.x, e.point.y)).collect(),
                })
                .collect(),
            seed_pair: self.seed_pair,
            failure: self.failure.clone(),
            unconverged_ba: self.unconverged_ba,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LocalReconstruction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = ReconstructionRecord::deserialize(d)?;
        let mut poses = BTreeMap::new();
        for p in &r.poses {
            poses.insert(p.camera_id, p.pose().map_err(serde::de::Error::custom)?);
        }
        Ok(Self {
            cluster: r.cluster_id,
            cameras: r.cameras,
            poses,
            points: r
                .points
                .into_iter()
                .map(|p| LocalPoint {
                    track: p.track,
                    position: Vector3::from_row_slice(&p.position),
                    observations: p
                        .observations
                        .into_iter()
                        .map(|(camera, feature, x, y)| TrackElement {
                            camera,
                            feature,
                            point: Point2::new(x, y),
                        })
                        .collect(),
                })
                .collect(),
            seed_pair: r.seed_pair,
            failure: r.failure,
            unconverged_ba: r.unconverged_ba,
        })
    }
}

/// Result of two-view initialization.
#[derive(Debug, Clone)]
pub struct SeedPair {
    pub pair: (CameraId, CameraId),
    /// Pose of the second camera; the first is the identity.
    pub pose: Pose,
    /// `(index into the candidate correspondences, point)` for triangulated inliers.
    pub points: Vec<(usize, Vector3<f64>)>,
    /// Indices of RANSAC inliers among the candidate correspondences.
    pub inliers: Vec<usize>,
    pub median_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeedError {
    TooFewCorrespondences(usize),
    NoModel,
    LowParallax(f64),
}

/// Two-view initialization of one camera pair from its pixel correspondences:
/// 8-point essential matrix in RANSAC, cheirality-checked decomposition,
/// triangulation of the inliers and a parallax check on the median angle.
pub fn estimate_two_view(
    pair: (CameraId, CameraId),
    k1: &Intrinsics,
    k2: &Intrinsics,
    pixels1: &[Point2<f64>],
    pixels2: &[Point2<f64>],
    config: &LocalSfmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SeedPair, SeedError> {
    if pixels1.len() < config.min_seed_correspondences {
        return Err(SeedError::TooFewCorrespondences(pixels1.len()));
    }
    let est = EssentialEstimator::new(k1, k2, pixels1, pixels2);
    let rc = RansacConfig {
        threshold: config.seed_threshold_px,
        confidence: config.ransac_confidence,
        max_iterations: config.ransac_max_iterations,
    };
    let res = ransac(&est, pixels1.len(), &rc, rng).ok_or(SeedError::NoModel)?;
    if res.inliers.len() < config.min_seed_correspondences {
        return Err(SeedError::TooFewCorrespondences(res.inliers.len()));
    }
    let n1: Vec<_> = res.inliers.iter().map(|&i| est.normalized1[i]).collect();
    let n2: Vec<_> = res.inliers.iter().map(|&i| est.normalized2[i]).collect();
    let (r, t, _) = recover_pose(&res.model.0, &n1, &n2);
    let first = Pose::identity();
    let second = Pose::from_rotation_translation(r, t);
    let check = TriangulationCheck::new(2, 0.0, config.max_reprojection_px);
    let mut points = Vec::new();
    let mut angles = Vec::new();
    for &idx in &res.inliers {
        let views = [
            View {
                pose: &first,
                intrinsics: k1,
                pixel: pixels1[idx],
            },
            View {
                pose: &second,
                intrinsics: k2,
                pixel: pixels2[idx],
            },
        ];
        if let Ok(x) = triangulate_checked(&views, &check) {
            angles.push(triangulation_angle(&x, &first.center, &second.center));
            points.push((idx, x));
        }
    }
    if points.len() < config.min_seed_correspondences {
        return Err(SeedError::LowParallax(0.0));
    }
    angles.sort_by(f64::total_cmp);
    let median = angles[angles.len() / 2];
    if !(median >= config.min_seed_median_angle_deg) {
        return Err(SeedError::LowParallax(median));
    }
    Ok(SeedPair {
        pair,
        pose: second,
        points,
        inliers: res.inliers,
        median_angle_deg: median,
    })
}

struct LocalTrack {
    id: usize,
    elements: Vec<TrackElement>,
    position: Option<Vector3<f64>>,
    used: Vec<bool>,
}

impl LocalTrack {
    fn element_of(&self, camera: CameraId) -> Option<usize> {
        self.elements.binary_search_by_key(&camera, |e| e.camera).ok()
    }

    fn clear(&mut self) {
        self.position = None;
        self.used.iter_mut().for_each(|u| *u = false);
    }
}

struct Builder<'a> {
    config: &'a LocalSfmConfig,
    intrinsics: &'a [Intrinsics],
    tracks: Vec<LocalTrack>,
    /// Per camera, the indices of the tracks observing it.
    by_camera: BTreeMap<CameraId, Vec<usize>>,
    poses: BTreeMap<CameraId, Pose>,
    seed: (CameraId, CameraId),
    unconverged_ba: usize,
}

impl Builder<'_> {
    fn score(&self, camera: CameraId) -> usize {
        self.by_camera
            .get(&camera)
            .map_or(0, |ts| ts.iter().filter(|&&t| self.tracks[t].position.is_some()).count())
    }

    fn register(&mut self, camera: CameraId, rng: &mut ChaCha8Rng) -> bool {
        let k = &self.intrinsics[camera];
        let mut pixels = Vec::new();
        let mut points = Vec::new();
        let mut refs = Vec::new();
        for &t in self.by_camera.get(&camera).map_or(&[][..], |v| v.as_slice()) {
            let track = &self.tracks[t];
            if let (Some(x), Some(e)) = (track.position, track.element_of(camera)) {
                pixels.push(track.elements[e].point);
                points.push(x);
                refs.push((t, e));
            }
        }
        if pixels.len() < self.config.min_registration_inliers {
            return false;
        }
        let est = ResectionEstimator {
            intrinsics: k,
            pixels: &pixels,
            points: &points,
        };
        let rc = RansacConfig {
            threshold: self.config.resection_threshold_px,
            confidence: self.config.ransac_confidence,
            max_iterations: self.config.ransac_max_iterations,
        };
        let Some(res) = ransac(&est, pixels.len(), &rc, rng) else {
            return false;
        };
        let ratio = res.inliers.len() as f64 / pixels.len() as f64;
        if res.inliers.len() < self.config.min_registration_inliers || ratio < self.config.min_inlier_ratio {
            return false;
        }
        self.poses.insert(camera, res.model);
        for &i in &res.inliers {
            let (t, e) = refs[i];
            self.tracks[t].used[e] = true;
        }
        true
    }

    /// Triangulates the unreconstructed tracks seen by `camera`.
    fn triangulate_new(&mut self, camera: CameraId) {
        let Some(list) = self.by_camera.get(&camera).cloned() else {
            return;
        };
        let check = TriangulationCheck::new(2, self.config.min_triangulation_angle_deg, self.config.max_reprojection_px);
        for t in list {
            if self.tracks[t].position.is_some() {
                continue;
            }
            let mut members: Vec<usize> = (0..self.tracks[t].elements.len())
                .filter(|&e| self.poses.contains_key(&self.tracks[t].elements[e].camera))
                .collect();
            while members.len() >= 2 {
                let track = &self.tracks[t];
                let views: Vec<View> = members
                    .iter()
                    .map(|&e| {
                        let el = &track.elements[e];
                        View {
                            pose: &self.poses[&el.camera],
                            intrinsics: &self.intrinsics[el.camera],
                            pixel: el.point,
                        }
                    })
                    .collect();
                match triangulate_checked(&views, &check) {
                    Ok(x) => {
                        let track = &mut self.tracks[t];
                        track.position = Some(x);
                        for &e in &members {
                            track.used[e] = true;
                        }
                        break;
                    }
                    Err(TriangulationError::Reprojection(_)) if members.len() > 2 => {
                        // drop the view that disagrees most and retry
                        let Ok(x) = crate::geometry::triangulate_dlt(&views) else {
                            break;
                        };
                        let worst = views
                            .iter()
                            .enumerate()
                            .map(|(i, v)| (i, max_reprojection_error(&x, std::slice::from_ref(v)).unwrap_or(f64::INFINITY)))
                            .max_by(|a, b| a.1.total_cmp(&b.1))
                            .map(|(i, _)| i)
                            .expect("non-empty");
                        members.remove(worst);
                    }
                    Err(_) => break,
                }
            }
        }
    }

    /// Adds observations of `camera` to already triangulated tracks when they reproject well.
    fn extend_tracks(&mut self, camera: CameraId) {
        let Some(list) = self.by_camera.get(&camera).cloned() else {
            return;
        };
        let pose = self.poses[&camera];
        let k = self.intrinsics[camera];
        for t in list {
            let track = &mut self.tracks[t];
            let (Some(x), Some(e)) = (track.position, track.element_of(camera)) else {
                continue;
            };
            if !track.used[e] && reprojection_error(&pose, &k, &track.elements[e].point, &x) <= self.config.max_reprojection_px {
                track.used[e] = true;
            }
        }
    }

    fn bundle_adjust(&mut self) -> Option<LmReport> {
        let ids: Vec<CameraId> = self.poses.keys().copied().collect();
        let slot: BTreeMap<CameraId, usize> = ids.iter().enumerate().map(|(s, &c)| (c, s)).collect();
        let (a, b) = self.seed;
        let baseline = self.poses[&b].center - self.poses[&a].center;
        let pinned = baseline.iamax();
        let cameras: Vec<BaCamera> = ids
            .iter()
            .map(|&c| {
                let mut cam = BaCamera::free(self.poses[&c], self.intrinsics[c]);
                if c == a {
                    cam.fixed = [true; 6];
                } else if c == b {
                    cam.fixed[3 + pinned] = true;
                }
                cam
            })
            .collect();
        let mut points = Vec::new();
        let mut observations = Vec::new();
        let mut point_track = Vec::new();
        for (t, track) in self.tracks.iter().enumerate() {
            let Some(x) = track.position else { continue };
            let pi = points.len();
            points.push(BaPoint { position: x, fixed: false });
            point_track.push(t);
            for (e, el) in track.elements.iter().enumerate() {
                if track.used[e] {
                    observations.push(Observation {
                        camera: slot[&el.camera],
                        point: pi,
                        pixel: el.point,
                    });
                }
            }
        }
        if points.is_empty() {
            return None;
        }
        let mut problem = BaProblem {
            cameras,
            points,
            observations,
        };
        let report = problem.solve(&self.config.lm);
        if !report.converged {
            self.unconverged_ba += 1;
            warn!("local bundle adjustment stopped after {} iterations", report.iterations);
        }
        for (s, &c) in ids.iter().enumerate() {
            self.poses.insert(c, problem.cameras[s].pose);
        }
        for (pi, &t) in point_track.iter().enumerate() {
            self.tracks[t].position = Some(problem.points[pi].position);
        }
        Some(report)
    }

    /// Removes observations above the reprojection threshold and points left
    /// with fewer than two views. Returns the number of removed observations.
    fn filter(&mut self) -> usize {
        let mut removed = 0;
        for track in &mut self.tracks {
            let Some(x) = track.position else { continue };
            for (e, el) in track.elements.iter().enumerate() {
                if track.used[e]
                    && reprojection_error(&self.poses[&el.camera], &self.intrinsics[el.camera], &el.point, &x) > self.config.max_reprojection_px
                {
                    track.used[e] = false;
                    removed += 1;
                }
            }
            if track.used.iter().filter(|&&u| u).count() < 2 {
                removed += track.used.iter().filter(|&&u| u).count();
                track.clear();
            }
        }
        removed
    }
}

/// Restricts global tracks to `cameras`, keeping those with at least two views.
fn restrict_tracks(cameras: &[CameraId], tracks: &[Track]) -> Vec<LocalTrack> {
    tracks
        .iter()
        .filter_map(|t| {
            let elements: Vec<TrackElement> = t.elements.iter().filter(|e| cameras.binary_search(&e.camera).is_ok()).copied().collect();
            (elements.len() >= 2).then(|| LocalTrack {
                id: t.id,
                used: vec![false; elements.len()],
                elements,
                position: None,
            })
        })
        .collect()
}

/// Incremental reconstruction of one cluster: seed pair, then repeated
/// next-best-view registration, triangulation and periodic bundle adjustment.
pub fn run_local_sfm(cluster: &Cluster, tracks: &[Track], intrinsics: &[Intrinsics], config: &LocalSfmConfig, seed: u64) -> LocalReconstruction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = LocalReconstruction {
        cluster: cluster.id,
        cameras: cluster.cameras.clone(),
        poses: BTreeMap::new(),
        points: Vec::new(),
        seed_pair: None,
        failure: None,
        unconverged_ba: 0,
    };
    let local = restrict_tracks(&cluster.cameras, tracks);
    let mut by_camera: BTreeMap<CameraId, Vec<usize>> = BTreeMap::new();
    for (t, track) in local.iter().enumerate() {
        for e in &track.elements {
            by_camera.entry(e.camera).or_default().push(t);
        }
    }

    // seed: heaviest edges first
    let mut edges = cluster.edges.clone();
    edges.sort_by(|a, b| b.weight.cmp(&a.weight).then((a.i, a.j).cmp(&(b.i, b.j))));
    let mut seed_found = None;
    for e in edges.iter().take(config.max_seed_attempts) {
        let mut corr = Vec::new();
        for &t in by_camera.get(&e.i).map_or(&[][..], |v| v.as_slice()) {
            let track = &local[t];
            if let (Some(a), Some(b)) = (track.element_of(e.i), track.element_of(e.j)) {
                corr.push((t, a, b));
            }
        }
        let p1: Vec<_> = corr.iter().map(|&(t, a, _)| local[t].elements[a].point).collect();
        let p2: Vec<_> = corr.iter().map(|&(t, _, b)| local[t].elements[b].point).collect();
        match estimate_two_view((e.i, e.j), &intrinsics[e.i], &intrinsics[e.j], &p1, &p2, config, &mut rng) {
            Ok(s) => {
                seed_found = Some((s, corr));
                break;
            }
            Err(err) => debug!("cluster {}: seed ({}, {}) rejected: {err:?}", cluster.id, e.i, e.j),
        }
    }
    let Some((seed_pair, corr)) = seed_found else {
        rec.failure = Some("no camera pair passed two-view initialization".into());
        return rec;
    };
    let (a, b) = seed_pair.pair;
    rec.seed_pair = Some((a, b));

    let mut builder = Builder {
        config,
        intrinsics,
        tracks: local,
        by_camera,
        poses: BTreeMap::from([(a, Pose::identity()), (b, seed_pair.pose)]),
        seed: (a, b),
        unconverged_ba: 0,
    };
    for &(idx, x) in &seed_pair.points {
        let (t, ea, eb) = corr[idx];
        let track = &mut builder.tracks[t];
        track.position = Some(x);
        track.used[ea] = true;
        track.used[eb] = true;
    }
    builder.bundle_adjust();
    builder.filter();

    let mut deferred: BTreeMap<CameraId, usize> = BTreeMap::new();
    let mut since_ba = 0;
    loop {
        let mut candidates: Vec<(usize, CameraId)> = cluster
            .cameras
            .iter()
            .filter(|c| !builder.poses.contains_key(c))
            .map(|&c| (builder.score(c), c))
            .filter(|&(s, c)| s >= config.min_registration_inliers && deferred.get(&c).is_none_or(|&d| s > d))
            .collect();
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
        let (score, camera) = candidates[0];
        if !builder.register(camera, &mut rng) {
            deferred.insert(camera, score);
            continue;
        }
        deferred.remove(&camera);
        builder.extend_tracks(camera);
        builder.triangulate_new(camera);
        since_ba += 1;
        if since_ba >= config.ba_every {
            builder.bundle_adjust();
            builder.filter();
            since_ba = 0;
        }
    }
    builder.bundle_adjust();
    if builder.filter() > 0 {
        builder.bundle_adjust();
        builder.filter();
    }

    rec.poses = builder.poses;
    rec.unconverged_ba = builder.unconverged_ba;
    rec.points = builder
        .tracks
        .iter()
        .filter_map(|t| {
            let position = t.position?;
            let observations: Vec<TrackElement> = t.elements.iter().zip(&t.used).filter(|(_, &u)| u).map(|(e, _)| *e).collect();
            (observations.len() >= 2).then_some(LocalPoint {
                track: t.id,
                position,
                observations,
            })
        })
        .collect();
    rec
}

/// Relative motions of every cluster edge whose endpoints are both registered.
pub fn extract_relative_motions(rec: &LocalReconstruction, edges: &[(CameraId, CameraId)]) -> Vec<RelativeMotion> {
    if rec.poses.len() < 2 {
        return Vec::new();
    }
    let mut support: BTreeMap<(CameraId, CameraId), usize> = BTreeMap::new();
    for p in &rec.points {
        let cams: BTreeSet<CameraId> = p.observations.iter().map(|o| o.camera).collect();
        let cams: Vec<_> = cams.into_iter().collect();
        for x in 0..cams.len() {
            for y in x + 1..cams.len() {
                *support.entry((cams[x], cams[y])).or_default() += 1;
            }
        }
    }
    let mut out = Vec::new();
    for &(a, b) in edges {
        let (i, j) = (a.min(b), a.max(b));
        let (Some(pi), Some(pj)) = (rec.poses.get(&i), rec.poses.get(&j)) else {
            continue;
        };
        out.push(RelativeMotion {
            i,
            j,
            cluster: rec.cluster,
            rotation: pj.rotation * pi.rotation.transpose(),
            translation: pj.rotation * (pi.center - pj.center),
            support: support.get(&(i, j)).copied().unwrap_or(0),
        });
    }
    out
}
