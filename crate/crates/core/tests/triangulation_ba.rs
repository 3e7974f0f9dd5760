mod common;

use std::collections::{BTreeMap, BTreeSet};

use csfm_core::ba::{BaCamera, BaPoint, BaProblem, Observation};
use csfm_core::clustering::Cluster;
use csfm_core::scene::{project_point, CameraId, Intrinsics, Layout, Pose, SyntheticScene};
use csfm_core::so3;
use csfm_core::tracks::{Track, TrackElement};
use csfm_core::triangulation_ba::{
    build_partitions, distributed_bundle_adjust, total_cost, triangulate_global, BundleConfig, GlobalPoint, PointStatus, Rejection,
    TriangulationConfig,
};
use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn intr() -> Intrinsics {
    Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap()
}

fn ring(n: usize, radius: f64) -> BTreeMap<CameraId, Pose> {
    (0..n)
        .map(|i| {
            let a = 0.5 * i as f64 / n as f64;
            let c = Vector3::new(radius * a.cos(), radius * a.sin(), 0.2 * i as f64);
            (i, Pose::look_at(c, Vector3::zeros(), Vector3::z()))
        })
        .collect()
}

fn bare(id: usize, cameras: Vec<CameraId>) -> Cluster {
    Cluster { id, cameras, edges: Vec::new() }
}

fn track_of(id: usize, poses: &BTreeMap<CameraId, Pose>, k: &Intrinsics, x: &Vector3<f64>, noise: &mut impl FnMut() -> (f64, f64)) -> Track {
    let elements = poses
        .iter()
        .map(|(&c, p)| {
            let px = project_point(p, k, x).unwrap();
            let (dx, dy) = noise();
            TrackElement {
                camera: c,
                feature: id as u32,
                point: Point2::new(px.x + dx, px.y + dy),
            }
        })
        .collect();
    Track { id, elements }
}

/// Active points at the generator's ground truth with the scene's (possibly
/// noisy) inlier observations; points seen by fewer than three cameras are skipped.
fn scene_points(scene: &SyntheticScene, owner: &BTreeMap<CameraId, usize>) -> Vec<GlobalPoint> {
    scene
        .visibility
        .iter()
        .enumerate()
        .filter(|(_, vis)| vis.len() >= 3)
        .map(|(id, vis)| {
            let observations: Vec<TrackElement> = vis
                .iter()
                .map(|&(camera, feature)| TrackElement {
                    camera,
                    feature,
                    point: scene.features[camera][feature as usize].pixel,
                })
                .collect();
            let mut counts = BTreeMap::new();
            for o in &observations {
                *counts.entry(owner[&o.camera]).or_insert(0usize) += 1;
            }
            let cluster_id = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&k, _)| k).unwrap();
            GlobalPoint {
                track_id: id,
                position: scene.points[id],
                cluster_id,
                observations,
                status: PointStatus::Active,
            }
        })
        .collect()
}

fn contiguous_clusters(cameras: usize, parts: usize) -> Vec<Cluster> {
    (0..parts).map(|k| bare(k, (k * cameras / parts..(k + 1) * cameras / parts).collect())).collect()
}

fn perturbed(poses: &BTreeMap<CameraId, Pose>, rng: &mut ChaCha8Rng, angle: f64, shift: f64) -> BTreeMap<CameraId, Pose> {
    let gauge = *poses.keys().next().unwrap();
    poses
        .iter()
        .map(|(&c, p)| {
            if c == gauge {
                return (c, *p);
            }
            let w = Vector3::new(rng.random_range(-angle..angle), rng.random_range(-angle..angle), rng.random_range(-angle..angle));
            let d = Vector3::new(rng.random_range(-shift..shift), rng.random_range(-shift..shift), rng.random_range(-shift..shift));
            (c, Pose { rotation: so3::exp(&w) * p.rotation, center: p.center + d })
        })
        .collect()
}

struct BaScene {
    poses: BTreeMap<CameraId, Pose>,
    intrinsics: Vec<Intrinsics>,
    points: Vec<GlobalPoint>,
}

fn ba_scene(sigma: f64, seed: u64, clusters: &[Cluster]) -> BaScene {
    let f = common::fixture(Layout::Orbit, 24, 400, sigma, 0.0, seed);
    let owner: BTreeMap<CameraId, usize> = clusters.iter().flat_map(|c| c.cameras.iter().map(move |&v| (v, c.id))).collect();
    BaScene {
        poses: f.scene.poses.iter().copied().enumerate().collect(),
        intrinsics: f.scene.intrinsics(),
        points: scene_points(&f.scene, &owner),
    }
}

#[test]
fn three_noise_free_views_recover_the_point() {
    let k = intr();
    let poses = ring(3, 6.0);
    let x = Vector3::new(0.3, -0.2, 0.4);
    let track = track_of(7, &poses, &k, &x, &mut || (0.0, 0.0));
    let pts = triangulate_global(&[track], &poses, &[k; 3], &[bare(0, vec![0, 1, 2])], &TriangulationConfig::default());
    assert_eq!(pts[0].status, PointStatus::Active);
    assert!((pts[0].position - x).norm() < 1e-9, "{}", (pts[0].position - x).norm());
    assert_eq!(pts[0].track_id, 7);
}

#[test]
fn two_views_are_insufficient() {
    let k = intr();
    let poses = ring(2, 6.0);
    let track = track_of(0, &poses, &k, &Vector3::zeros(), &mut || (0.0, 0.0));
    let pts = triangulate_global(&[track], &poses, &[k; 2], &[bare(0, vec![0, 1])], &TriangulationConfig::default());
    assert_eq!(pts[0].status, PointStatus::Rejected(Rejection::InsufficientViews));
}

#[test]
fn unposed_observations_do_not_count() {
    let k = intr();
    let mut poses = ring(3, 6.0);
    let track = track_of(0, &poses, &k, &Vector3::zeros(), &mut || (0.0, 0.0));
    poses.remove(&2);
    let pts = triangulate_global(&[track], &poses, &[k; 3], &[bare(0, vec![0, 1, 2])], &TriangulationConfig::default());
    assert_eq!(pts[0].status, PointStatus::Rejected(Rejection::InsufficientViews));
    assert_eq!(pts[0].observations.len(), 2);
}

#[test]
fn gross_outlier_is_rejected_by_reprojection() {
    let k = intr();
    let poses = ring(4, 6.0);
    let mut track = track_of(0, &poses, &k, &Vector3::zeros(), &mut || (0.0, 0.0));
    track.elements[3].point.x += 60.0;
    let pts = triangulate_global(&[track], &poses, &[k; 4], &[bare(0, vec![0, 1, 2, 3])], &TriangulationConfig::default());
    assert_eq!(pts[0].status, PointStatus::Rejected(Rejection::Reprojection));
}

#[test]
fn point_behind_cameras_fails_cheirality() {
    let k = intr();
    let poses = ring(3, 6.0);
    let x = Vector3::new(0.1, 0.2, 0.0);
    let track = track_of(0, &poses, &k, &x, &mut || (0.0, 0.0));
    // the same pixels seen by cameras turned around
    let flipped: BTreeMap<CameraId, Pose> = poses
        .iter()
        .map(|(&c, p)| {
            let flip = nalgebra::Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
            let back = Pose { rotation: flip * so3::exp(&Vector3::new(0.0, std::f64::consts::PI, 0.0)) * p.rotation, center: p.center };
            (c, back)
        })
        .collect();
    let pts = triangulate_global(&[track], &flipped, &[k; 3], &[bare(0, vec![0, 1, 2])], &TriangulationConfig::default());
    assert!(matches!(pts[0].status, PointStatus::Rejected(Rejection::Cheirality | Rejection::Reprojection)), "{:?}", pts[0].status);
}

#[test]
fn owner_is_plurality_cluster() {
    let k = intr();
    let poses = ring(5, 6.0);
    let track = track_of(0, &poses, &k, &Vector3::zeros(), &mut || (0.0, 0.0));
    let clusters = [bare(4, vec![0, 1]), bare(2, vec![2, 3]), bare(9, vec![4])];
    let pts = triangulate_global(&[track], &poses, &[k; 5], &clusters, &TriangulationConfig::default());
    assert_eq!(pts[0].cluster_id, 2);
}

#[test]
fn noisy_six_views_reproject_within_budget() {
    let k = intr();
    let poses = ring(6, 6.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let tracks: Vec<Track> = (0..200)
        .map(|id| {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut noise = || (normal.sample(&mut rng), normal.sample(&mut rng));
            track_of(id, &poses, &k, &x, &mut noise)
        })
        .collect();
    let pts = triangulate_global(&tracks, &poses, &[k; 6], &[bare(0, (0..6).collect())], &TriangulationConfig::default());
    for p in &pts {
        assert!(p.is_active());
        let (cost, n) = total_cost(std::slice::from_ref(p), &poses, &[k; 6]);
        assert_eq!(n, 6);
        let rms = (cost / n as f64).sqrt();
        assert!(rms <= 1.5, "track {} rms {rms}", p.track_id);
    }
}

#[test]
fn partitions_are_disjoint_and_cover_every_observation() {
    let clusters = contiguous_clusters(24, 3);
    let s = ba_scene(0.0, 1, &clusters);
    let (parts, boundary) = build_partitions(&s.points, &s.poses, &clusters);
    let mut cams = BTreeSet::new();
    for p in &parts {
        for &c in &p.cameras {
            assert!(cams.insert(c), "camera {c} in two partitions");
        }
    }
    let mut seen = BTreeSet::new();
    for p in &parts {
        for &(pi, oi) in &p.observations {
            assert!(p.cameras.contains(&s.points[pi].observations[oi].camera));
            assert!(seen.insert((pi, oi)));
        }
    }
    let total: usize = s.points.iter().map(|p| p.observations.len()).sum();
    assert_eq!(seen.len(), total);
    // every point is interior to one partition or on the boundary, never both
    let mut owned = vec![0usize; s.points.len()];
    for p in &parts {
        for &pi in &p.interior {
            owned[pi] += 1;
        }
    }
    for &pi in &boundary {
        owned[pi] += 1;
    }
    assert!(owned.iter().all(|&n| n == 1));
    assert!(!boundary.is_empty());
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let clusters = contiguous_clusters(24, 3);
    let s = ba_scene(0.0, 2, &clusters);
    let out = distributed_bundle_adjust(&s.poses, &s.points, &s.intrinsics, &clusters, &BundleConfig::default());
    assert_eq!(out.rounds.len(), 2, "{:?}", out.rounds);
    assert!(out.rounds.iter().all(|r| r.cost < 1e-12), "{:?}", out.rounds);
    assert!(out.rolled_back.is_empty());
}

#[test]
fn single_partition_matches_monolithic_lm() {
    let clusters = vec![bare(0, (0..24).collect())];
    let s = ba_scene(0.5, 4, &clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let init = perturbed(&s.poses, &mut rng, 0.01, 0.05);
    let config = BundleConfig::default();
    let out = distributed_bundle_adjust(&init, &s.points, &s.intrinsics, &clusters, &config);

    let ids: Vec<CameraId> = init.keys().copied().collect();
    let mut mono = BaProblem {
        cameras: ids
            .iter()
            .map(|&c| if c == ids[0] { BaCamera::fixed(init[&c], s.intrinsics[c]) } else { BaCamera::free(init[&c], s.intrinsics[c]) })
            .collect(),
        points: s.points.iter().map(|p| BaPoint { position: p.position, fixed: false }).collect(),
        observations: s
            .points
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| p.observations.iter().map(move |o| Observation { camera: o.camera, point: pi, pixel: o.point }))
            .collect(),
    };
    let report = mono.solve(&config.lm);
    let distributed = out.rounds.last().unwrap().cost;
    let rel = (distributed - report.final_cost).abs() / report.final_cost;
    assert!(rel < 1e-10, "distributed {distributed} monolithic {} rel {rel:e}", report.final_cost);
    assert!(distributed < out.rounds[0].cost);
}

#[test]
fn cost_never_increases_across_rounds() {
    let clusters = contiguous_clusters(24, 3);
    for seed in 0..3 {
        let s = ba_scene(0.5, 10 + seed, &clusters);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = perturbed(&s.poses, &mut rng, 0.02, 0.1);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let points: Vec<GlobalPoint> = s
            .points
            .iter()
            .map(|p| GlobalPoint {
                position: p.position + Vector3::from_fn(|_, _| normal.sample(&mut rng)),
                ..p.clone()
            })
            .collect();
        let out = distributed_bundle_adjust(&init, &points, &s.intrinsics, &clusters, &BundleConfig::default());
        assert!(out.rounds.len() >= 2);
        for w in out.rounds.windows(2) {
            assert!(w[1].cost <= w[0].cost, "seed {seed}: {:?}", out.rounds);
        }
        let last = out.rounds.last().unwrap();
        assert!(last.rms < 1.0, "seed {seed}: final rms {}", last.rms);
        assert_eq!(out.poses[&0], init[&0]);
    }
}

#[test]
fn round_log_has_header_and_one_line_per_round() {
    let clusters = contiguous_clusters(24, 2);
    let s = ba_scene(0.0, 5, &clusters);
    let out = distributed_bundle_adjust(&s.poses, &s.points, &s.intrinsics, &clusters, &BundleConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ba_rounds.csv");
    csfm_core::triangulation_ba::write_round_log(&path, &out.rounds).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "round,cost,rms_px");
    assert_eq!(lines.len(), out.rounds.len() + 1);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn global_point_json_round_trips() {
    let p = GlobalPoint {
        track_id: 3,
        position: Vector3::new(1.0, 2.0, 3.0),
        cluster_id: 1,
        observations: vec![TrackElement { camera: 4, feature: 9, point: Point2::new(10.5, 20.25) }],
        status: PointStatus::Rejected(Rejection::Cheirality),
    };
    let s = serde_json::to_string(&p).unwrap();
    let back: GlobalPoint = serde_json::from_str(&s).unwrap();
    assert_eq!(back, p);
}
