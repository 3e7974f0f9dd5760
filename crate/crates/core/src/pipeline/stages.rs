use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::*;
use crate::clustering::{cluster_cameras, ClusterConfig, ClusterSet, ClusterSetFile};
use crate::evaluation::{connected_pairs, epipolar_error, pose_error_report, ErrorReport};
use crate::local_sfm::{extract_relative_motions, run_local_sfm, LocalReconstruction, RelativeMotion};
use crate::motion_averaging::{average_motions, GlobalMotion};
use crate::scene::io::{read_ground_truth, read_match_graph, write_ply, MatchGraphFile, PoseRecord};
use crate::scene::{build_camera_graph, generate_synthetic_scene, CameraId, Intrinsics, MatchEdge, Pose};
use crate::tracks::{generate_tracks, Track};
use crate::triangulation_ba::{distributed_bundle_adjust, triangulate_global, validated_tracks, write_round_log, GlobalPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LocalSfmArtifact {
    pub reconstructions: Vec<LocalReconstruction>,
    pub motions: Vec<RelativeMotion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EvaluationReport {
    /// Averaged poses and triangulated points, before bundle adjustment.
    pub motion_averaging: ErrorReport,
    pub bundle_adjusted: ErrorReport,
    /// Mean reprojection error of the adjusted reconstruction, pixels.
    pub mean_reprojection_error: f64,
}

fn read<T: DeserializeOwned>(dir: &Path, file: &str) -> Result<T, PipelineError> {
    let bytes = fs::read(dir.join(file)).map_err(|e| PipelineError::Data(format!("{file}: {e}")))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Data(format!("{file}: {e}")))
}

fn write<T: Serialize + ?Sized>(dir: &Path, file: &str, value: &T) -> Result<(), PipelineError> {
    write_atomic(&dir.join(file), &serde_json::to_vec_pretty(value)?)
}

fn match_graph(dir: &Path) -> Result<(Vec<Intrinsics>, Vec<MatchEdge>), PipelineError> {
    Ok(read_match_graph(&dir.join(MATCH_GRAPH))?)
}

fn clusters(dir: &Path, config: &PipelineConfig, matches: &[MatchEdge], n: usize) -> Result<ClusterSet, PipelineError> {
    let graph = build_camera_graph(matches, n)?;
    let file: ClusterSetFile = read(dir, CLUSTERS)?;
    Ok(ClusterSet::from_file(file, &graph, config.clustering.completeness_ratio)?)
}

fn dense(poses: &BTreeMap<CameraId, Pose>, n: usize) -> Vec<Option<Pose>> {
    (0..n).map(|c| poses.get(&c).copied()).collect()
}

pub(super) fn run_stage(stage: Stage, config: &PipelineConfig, dir: &Path) -> Result<Option<EvaluationReport>, PipelineError> {
    match stage {
        Stage::Synth => synth(config, dir)?,
        Stage::Cluster => cluster(config, dir)?,
        Stage::Tracks => tracks(config, dir)?,
        Stage::LocalSfm => local_sfm(config, dir)?,
        Stage::Average => average(config, dir)?,
        Stage::Triangulate => triangulate(config, dir)?,
        Stage::Ba => bundle(config, dir)?,
        Stage::Evaluate => return evaluate(config, dir).map(Some),
    }
    Ok(None)
}

fn synth(config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let (intrinsics, matches, gt) = match &config.input {
        Some(path) => {
            let (intrinsics, matches) = read_match_graph(path)?;
            let gt: Vec<PoseRecord> = match &config.ground_truth {
                Some(p) => read_ground_truth(p)?
                    .iter()
                    .enumerate()
                    .filter_map(|(id, p)| p.as_ref().map(|p| PoseRecord::new(id, p)))
                    .collect(),
                None => Vec::new(),
            };
            (intrinsics, matches, gt)
        }
        None => {
            let cfg = config.synth.to_config(Stage::Synth.seed(config.seed, 0));
            let (scene, matches) = generate_synthetic_scene(&cfg)?;
            let gt = scene.poses.iter().enumerate().map(|(id, p)| PoseRecord::new(id, p)).collect();
            (scene.intrinsics(), matches, gt)
        }
    };
    write(dir, MATCH_GRAPH, &MatchGraphFile::new(intrinsics, &matches))?;
    write(dir, GROUND_TRUTH, &gt)
}

fn cluster(config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let (intrinsics, matches) = match_graph(dir)?;
    let graph = build_camera_graph(&matches, intrinsics.len())?;
    let cfg = ClusterConfig {
        seed: Stage::Cluster.seed(config.seed, 0),
        ..config.clustering
    };
    let set = cluster_cameras(&graph, &cfg)?;
    if !set.dropped.is_empty() {
        warn!("{} isolated cameras dropped", set.dropped.len());
    }
    write(dir, CLUSTERS, &set.to_file())
}

fn tracks(config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let (intrinsics, matches) = match_graph(dir)?;
    let set = clusters(dir, config, &matches, intrinsics.len())?;
    let tracks = generate_tracks(&set.tree, &matches)?;
    write(dir, TRACKS, &tracks)
}

fn local_sfm(config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let (intrinsics, matches) = match_graph(dir)?;
    let set = clusters(dir, config, &matches, intrinsics.len())?;
    let tracks: Vec<Track> = read(dir, TRACKS)?;
    let results: Vec<(LocalReconstruction, Vec<RelativeMotion>)> = set
        .interdependent
        .par_iter()
        .map(|c| {
            let seed = Stage::LocalSfm.seed(config.seed, c.id as u64);
            let rec = run_local_sfm(c, &tracks, &intrinsics, &config.local_sfm, seed);
            let edges: Vec<(CameraId, CameraId)> = c.edges.iter().map(|e| (e.i, e.j)).collect();
            let motions = extract_relative_motions(&rec, &edges);
            (rec, motions)
        })
        .collect();
    for (rec, _) in &results {
        if let Some(f) = &rec.failure {
            warn!("cluster {} failed: {f}", rec.cluster);
        }
    }
    if results.iter().all(|(r, _)| r.is_failed()) {
        return Err(PipelineError::Numerical("every cluster reconstruction failed".into()));
    }
    let (reconstructions, motions): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let artifact = LocalSfmArtifact {
        reconstructions,
        motions: motions.into_iter().flatten().collect(),
    };
    write(dir, LOCAL_SFM, &artifact)
}

fn average(config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let local: LocalSfmArtifact = read(dir, LOCAL_SFM)?;
    let known: Vec<usize> = local.reconstructions.iter().filter(|r| !r.is_failed()).map(|r| r.cluster).collect();
    let motion = average_motions(&local.motions, &known, &config.motion)?;
    write(dir, GLOBAL_MOTION, &motion)
}

fn triangulate(config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let (intrinsics, matches) = match_graph(dir)?;
    let set = clusters(dir, config, &matches, intrinsics.len())?;
    let tracks: Vec<Track> = read(dir, TRACKS)?;
    let local: LocalSfmArtifact = read(dir, LOCAL_SFM)?;
    let motion: GlobalMotion = read(dir, GLOBAL_MOTION)?;
    let valid = validated_tracks(&tracks, &local.reconstructions);
    let points = triangulate_global(&valid, &motion.poses, &intrinsics, &set.independent, &config.triangulation);
    write(dir, POINTS, &points)
}

fn bundle(config: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    let (intrinsics, matches) = match_graph(dir)?;
    let set = clusters(dir, config, &matches, intrinsics.len())?;
    let points: Vec<GlobalPoint> = read(dir, POINTS)?;
    let motion: GlobalMotion = read(dir, GLOBAL_MOTION)?;
    let out = distributed_bundle_adjust(&motion.poses, &points, &intrinsics, &set.independent, &config.bundle);
    if !out.rounds.last().is_some_and(|r| r.cost.is_finite()) {
        return Err(PipelineError::Numerical("bundle adjustment produced a non-finite cost".into()));
    }
    for (round, cluster) in &out.rolled_back {
        warn!("bundle round {round}: partition {cluster} rolled back");
    }
    let adjusted = GlobalMotion {
        poses: out.poses,
        ..motion
    };
    write(dir, BA_POSES, &adjusted)?;
    write(dir, BA_POINTS, &out.points)?;
    let active: Vec<_> = out.points.iter().filter(|p| p.is_active()).map(|p| p.position).collect();
    let tmp = dir.join(format!("{BA_PLY}.tmp"));
    write_ply(&tmp, &active, None)?;
    fs::rename(&tmp, dir.join(BA_PLY))?;
    let tmp = dir.join(format!("{BA_ROUNDS}.tmp"));
    write_round_log(&tmp, &out.rounds)?;
    fs::rename(&tmp, dir.join(BA_ROUNDS))?;
    Ok(())
}

fn structure_report(
    poses: &BTreeMap<CameraId, Pose>,
    points: &[GlobalPoint],
    gt: &[Option<Pose>],
    intrinsics: &[Intrinsics],
    matches: &[MatchEdge],
    clusters: usize,
) -> Result<ErrorReport, PipelineError> {
    let n = intrinsics.len();
    let estimate = dense(poses, n);
    let common = (0..n.min(gt.len())).filter(|&c| estimate[c].is_some() && gt[c].is_some()).count();
    if common < 3 {
        return Err(PipelineError::Data(format!("evaluation needs 3 cameras with ground truth, found {common}")));
    }
    let pairs: Vec<(CameraId, CameraId)> = matches.iter().map(|m| (m.i, m.j)).collect();
    let mut report = pose_error_report(&estimate, gt, &pairs)?;
    report.num_cameras = n;
    report.median_epipolar_error = epipolar_error(&estimate, intrinsics, matches).unwrap_or(0.0);
    let active: Vec<Vec<CameraId>> = points
        .iter()
        .filter(|p| p.is_active())
        .map(|p| p.observations.iter().map(|o| o.camera).collect())
        .collect();
    report.num_points = active.len();
    report.num_connected_pairs = connected_pairs(active.iter().map(|v| v.as_slice()));
    report.num_clusters = clusters;
    Ok(report)
}

fn evaluate(config: &PipelineConfig, dir: &Path) -> Result<EvaluationReport, PipelineError> {
    let (intrinsics, matches) = match_graph(dir)?;
    let set = clusters(dir, config, &matches, intrinsics.len())?;
    let gt = read_ground_truth(&dir.join(GROUND_TRUTH))?;
    let motion: GlobalMotion = read(dir, GLOBAL_MOTION)?;
    let points: Vec<GlobalPoint> = read(dir, POINTS)?;
    let adjusted: GlobalMotion = read(dir, BA_POSES)?;
    let adjusted_points: Vec<GlobalPoint> = read(dir, BA_POINTS)?;
    let k = set.interdependent.len();
    let before = structure_report(&motion.poses, &points, &gt, &intrinsics, &matches, k)?;
    let after = structure_report(&adjusted.poses, &adjusted_points, &gt, &intrinsics, &matches, k)?;
    let errors: Vec<f64> = adjusted_points
        .iter()
        .filter(|p| p.is_active())
        .flat_map(|p| {
            p.observations.iter().filter_map(|o| {
                crate::ba::reprojection_residual(&adjusted.poses[&o.camera], &intrinsics[o.camera], &p.position, &o.point).map(|r| r.norm())
            })
        })
        .collect();
    let report = EvaluationReport {
        motion_averaging: before,
        bundle_adjusted: after,
        mean_reprojection_error: if errors.is_empty() { 0.0 } else { errors.iter().sum::<f64>() / errors.len() as f64 },
    };
    write(dir, REPORT, &report)?;
    Ok(report)
}
