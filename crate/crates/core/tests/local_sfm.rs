mod common;

use common::fixture;
use csfm_core::evaluation::{align_similarity, pose_error_report};
use csfm_core::geometry::{ransac, RansacConfig, ResectionEstimator};
use csfm_core::local_sfm::{estimate_two_view, extract_relative_motions, run_local_sfm, LocalSfmConfig, SeedError};
use csfm_core::scene::{project_point, Layout, Pose};
use csfm_core::so3;
use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn edges_of(c: &csfm_core::clustering::Cluster) -> Vec<(usize, usize)> {
    c.edges.iter().map(|e| (e.i, e.j)).collect()
}

#[test]
fn noise_free_cluster_registers_every_camera_exactly() {
    let f = fixture(Layout::Orbit, 20, 600, 0.0, 0.0, 1);
    let cluster = f.cluster(0, f.all_cameras());
    let rec = run_local_sfm(&cluster, &f.tracks(), &f.scene.intrinsics(), &LocalSfmConfig::default(), 9);
    assert!(rec.failure.is_none());
    assert_eq!(rec.poses.len(), 20);
    let est: Vec<Option<Pose>> = (0..20).map(|i| rec.poses.get(&i).copied()).collect();
    let report = pose_error_report(&est, &f.gt(), &edges_of(&cluster)).unwrap();
    let diameter = f.scene.diameter();
    assert!(report.mean_position_error < 1e-6 * diameter, "{report:?}");
    assert!(report.mean_rel_rotation_error.to_radians() < 1e-6);
}

#[test]
fn noisy_cluster_with_outliers() {
    let f = fixture(Layout::Orbit, 50, 1500, 0.5, 0.1, 2);
    let cluster = f.cluster(0, f.all_cameras());
    let intr = f.scene.intrinsics();
    let rec = run_local_sfm(&cluster, &f.tracks(), &intr, &LocalSfmConfig::default(), 3);
    assert!(rec.poses.len() as f64 >= 0.95 * 50.0, "registered {}", rec.poses.len());
    let mean = rec.mean_reprojection_error(&intr);
    assert!(mean < 1.0, "mean reprojection {mean}");
    for p in &rec.points {
        assert!(p.observations.len() >= 2);
    }
}

#[test]
fn two_camera_cluster_is_the_seed_pair() {
    let f = fixture(Layout::Orbit, 2, 200, 0.0, 0.0, 4);
    let cluster = f.cluster(0, vec![0, 1]);
    let rec = run_local_sfm(&cluster, &f.tracks(), &f.scene.intrinsics(), &LocalSfmConfig::default(), 0);
    assert_eq!(rec.seed_pair, Some((0, 1)));
    assert_eq!(rec.poses.len(), 2);
    let c1 = rec.poses[&1].center;
    assert!(rec.poses[&0].center.norm() < 1e-12);
    assert!((c1.norm() - 1.0).abs() < 1e-9);
}

fn two_view_data(rng: &mut ChaCha8Rng, p2: &Pose, n: usize) -> (Vec<Point2<f64>>, Vec<Point2<f64>>) {
    let k = csfm_core::scene::Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap();
    let p1 = Pose::identity();
    let mut a = Vec::new();
    let mut b = Vec::new();
    while a.len() < n {
        let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(5.0..10.0));
        if let (Ok(u), Ok(v)) = (project_point(&p1, &k, &x), project_point(p2, &k, &x)) {
            if k.contains(&u) && k.contains(&v) {
                a.push(u);
                b.push(v);
            }
        }
    }
    (a, b)
}

#[test]
fn two_view_recovers_known_relative_pose() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = csfm_core::scene::Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap();
    let truth = Pose::new(so3::exp(&Vector3::new(0.01, -0.08, 0.02)), Vector3::new(1.0, 0.2, 0.1)).unwrap();
    let (a, b) = two_view_data(&mut rng, &truth, 100);
    let seed = estimate_two_view((0, 1), &k, &k, &a, &b, &LocalSfmConfig::default(), &mut rng).unwrap();
    assert_eq!(seed.inliers.len(), 100);
    assert!(so3::angle_between(&seed.pose.rotation, &truth.rotation) < 1e-6);
    let t_est = seed.pose.translation().normalize();
    let t_true = truth.translation().normalize();
    assert!(t_est.cross(&t_true).norm().atan2(t_est.dot(&t_true)) < 1e-6);
}

#[test]
fn zero_baseline_pair_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let k = csfm_core::scene::Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap();
    let same = Pose::identity();
    let (a, b) = two_view_data(&mut rng, &same, 60);
    let res = estimate_two_view((0, 1), &k, &k, &a, &b, &LocalSfmConfig::default(), &mut rng);
    assert!(matches!(res, Err(SeedError::LowParallax(_)) | Err(SeedError::NoModel)), "{res:?}");
}

#[test]
fn two_view_ransac_keeps_true_inliers_under_outliers() {
    let k = csfm_core::scene::Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap();
    let truth = Pose::new(so3::exp(&Vector3::new(0.02, 0.1, -0.01)), Vector3::new(-1.0, 0.1, 0.3)).unwrap();
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (a, mut b) = two_view_data(&mut rng, &truth, 150);
        let n_out = 60;
        for p in b.iter_mut().take(n_out) {
            *p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let normal = rand_distr::Normal::new(0.0, 0.5).unwrap();
        for p in b.iter_mut().skip(n_out) {
            p.x += rng.sample(normal);
            p.y += rng.sample(normal);
        }
        let seed = estimate_two_view((0, 1), &k, &k, &a, &b, &LocalSfmConfig::default(), &mut rng).unwrap();
        let kept = seed.inliers.iter().filter(|&&i| i >= n_out).count();
        assert!(kept as f64 >= 0.95 * 90.0, "trial {trial}: kept {kept}");
    }
}

#[test]
fn resection_with_mislabeled_correspondences() {
    let k = csfm_core::scene::Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap();
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let pose = Pose::new(so3::random(&mut rng), Vector3::new(0.0, 0.0, 0.0)).unwrap();
        let pose = Pose::new(pose.rotation, -pose.rotation.transpose() * Vector3::new(0.0, 0.0, 8.0)).unwrap();
        let mut px = Vec::new();
        let mut pts = Vec::new();
        while pts.len() < 50 {
            let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            if let Ok(p) = project_point(&pose, &k, &x) {
                if k.contains(&p) {
                    px.push(p);
                    pts.push(x);
                }
            }
        }
        // noise-free: exact recovery
        let est = ResectionEstimator { intrinsics: &k, pixels: &px, points: &pts };
        let res = ransac(&est, 50, &RansacConfig::new(4.0), &mut rng).unwrap();
        assert_eq!(res.inliers.len(), 50);
        assert!(so3::angle_between(&res.model.rotation, &pose.rotation) < 1e-6);
        assert!((res.model.center - pose.center).norm() < 1e-6 * 6.0);
        // 30% of the 2D-3D pairs shuffled
        for i in 0..15 {
            let j = rng.random_range(0..50);
            px.swap(i, j);
        }
        let est = ResectionEstimator { intrinsics: &k, pixels: &px, points: &pts };
        let res = ransac(&est, 50, &RansacConfig::new(4.0), &mut rng).unwrap();
        assert!(so3::angle_between(&res.model.rotation, &pose.rotation).to_degrees() < 0.5);
        assert!((res.model.center - pose.center).norm() < 0.01 * 6.0);
    }
}

#[test]
fn relative_motions_are_gauge_invariant() {
    let f = fixture(Layout::Orbit, 8, 300, 0.0, 0.0, 7);
    let cluster = f.cluster(0, f.all_cameras());
    let rec = run_local_sfm(&cluster, &f.tracks(), &f.scene.intrinsics(), &LocalSfmConfig::default(), 1);
    let base = extract_relative_motions(&rec, &edges_of(&cluster));
    assert!(!base.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let s = rng.random_range(0.1..10.0);
        let q = so3::random(&mut rng);
        let d = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let moved = extract_relative_motions(&rec.transformed(s, &q, &d), &edges_of(&cluster));
        for (a, b) in base.iter().zip(&moved) {
            assert!(so3::angle_between(&a.rotation, &b.rotation) < 1e-9);
            assert!((b.translation - s * a.translation).norm() < 1e-9 * s.max(1.0));
        }
    }
}

#[test]
fn similarity_of_ground_truth_gives_exact_motions() {
    let f = fixture(Layout::Orbit, 6, 200, 0.0, 0.0, 9);
    let cluster = f.cluster(3, f.all_cameras());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt_rec = csfm_core::local_sfm::LocalReconstruction {
        cluster: 3,
        cameras: f.all_cameras(),
        poses: f.scene.poses.iter().copied().enumerate().collect(),
        points: vec![],
        seed_pair: None,
        failure: None,
        unconverged_ba: 0,
    };
    let s = 2.5;
    let q = so3::random(&mut rng);
    let d = Vector3::new(1.0, 2.0, 3.0);
    let motions = extract_relative_motions(&gt_rec.transformed(s, &q, &d), &edges_of(&cluster));
    for m in motions {
        let (pi, pj) = (f.scene.poses[m.i], f.scene.poses[m.j]);
        assert!(so3::angle_between(&m.rotation, &(pj.rotation * pi.rotation.transpose())) < 1e-12);
        assert!((m.translation - s * (pj.rotation * (pi.center - pj.center))).norm() < 1e-9);
    }
}

#[test]
fn overlapping_clusters_agree_on_shared_pairs() {
    let f = fixture(Layout::Orbit, 16, 600, 0.0, 0.0, 11);
    let tracks = f.tracks();
    let intr = f.scene.intrinsics();
    let a = f.cluster(0, (0..10).collect());
    let b = f.cluster(1, (6..16).collect());
    let ra = run_local_sfm(&a, &tracks, &intr, &LocalSfmConfig::default(), 1);
    let rb = run_local_sfm(&b, &tracks, &intr, &LocalSfmConfig::default(), 2);
    let ma = extract_relative_motions(&ra, &edges_of(&a));
    let mb = extract_relative_motions(&rb, &edges_of(&b));
    let mut shared = 0;
    for x in &ma {
        if let Some(y) = mb.iter().find(|y| (y.i, y.j) == (x.i, x.j)) {
            shared += 1;
            assert!(so3::angle_between(&x.rotation, &y.rotation) < 1e-6);
            let (u, v) = (x.translation.normalize(), y.translation.normalize());
            assert!(u.cross(&v).norm().atan2(u.dot(&v)) < 1e-6);
        }
    }
    assert!(shared > 0);
    let _ = align_similarity;
}
