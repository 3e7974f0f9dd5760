use csfm_core::ba::{apply_pose_update, projection_jacobian, BaCamera, BaPoint, BaProblem, LmConfig, Observation};
use csfm_core::scene::{project_point, Intrinsics, Pose};
use csfm_core::so3;
use nalgebra::{Point2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intr() -> Intrinsics {
    Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng) -> (Pose, Vector3<f64>) {
    let pose = Pose {
        rotation: so3::random(rng),
        center: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
    };
    // point in front of the camera at depth 2..10
    let dir = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3), 1.0);
    let depth = rng.random_range(2.0..10.0);
    let point = pose.center + pose.rotation.transpose() * (dir * depth);
    (pose, point)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn analytic_jacobians_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = intr();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (pose, x) = random_config(&mut rng);
        let (_, jc, jp) = projection_jacobian(&pose, &k, &x).unwrap();
        for a in 0..6 {
            let mut d = Vector6::zeros();
            d[a] = h;
            let plus = project_point(&apply_pose_update(&pose, &d), &k, &x).unwrap();
            let minus = project_point(&apply_pose_update(&pose, &(-d)), &k, &x).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(fd.x, jc[(0, a)])).max(rel_err(fd.y, jc[(1, a)]));
        }
        for a in 0..3 {
            let mut d = Vector3::zeros();
            d[a] = h;
            let plus = project_point(&pose, &k, &(x + d)).unwrap();
            let minus = project_point(&pose, &k, &(x - d)).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(fd.x, jp[(0, a)])).max(rel_err(fd.y, jp[(1, a)]));
        }
    }
    assert!(worst < 1e-4, "max relative jacobian error {worst:e}");
}

#[test]
fn fixed_parameters_do_not_move() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = intr();
    let poses: Vec<Pose> = (0..4)
        .map(|i| Pose::look_at(Vector3::new(i as f64 - 1.5, -6.0, 0.3 * i as f64), Vector3::zeros(), Vector3::z()))
        .collect();
    let points: Vec<Vector3<f64>> = (0..40)
        .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
        .collect();
    let mut observations = Vec::new();
    for (c, p) in poses.iter().enumerate() {
        for (i, x) in points.iter().enumerate() {
            let px = project_point(p, &k, x).unwrap();
            observations.push(Observation {
                camera: c,
                point: i,
                pixel: Point2::new(px.x + rng.random_range(-1.0..1.0), px.y + rng.random_range(-1.0..1.0)),
            });
        }
    }
    let mut cameras: Vec<BaCamera> = poses.iter().map(|&p| BaCamera::free(p, k)).collect();
    cameras[0] = BaCamera::fixed(poses[0], k);
    cameras[1].fixed = [true, true, true, false, false, false];
    let mut problem = BaProblem {
        cameras,
        points: points.iter().enumerate().map(|(i, &position)| BaPoint { position, fixed: i == 0 }).collect(),
        observations,
    };
    let report = problem.solve(&LmConfig::default());
    assert!(report.final_cost < report.initial_cost);
    assert!(report.accepted_costs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(problem.cameras[0].pose, poses[0]);
    assert_eq!(problem.cameras[1].pose.rotation, poses[1].rotation);
    assert_eq!(problem.points[0].position, points[0]);
}
