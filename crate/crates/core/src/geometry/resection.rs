use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Point2, Vector3};

use super::ransac::Estimator;
use crate::ba::{BaCamera, BaPoint, BaProblem, LmConfig, Observation};
use crate::scene::{Intrinsics, Pose};
use crate::so3;

/// Linear 6-point resection (DLT) from 2D-3D correspondences. The rotation
/// part is projected onto SO(3).
pub fn resection_dlt(k: &Intrinsics, pixels: &[Point2<f64>], points: &[Vector3<f64>]) -> Option<Pose> {
    assert_eq!(pixels.len(), points.len());
    let n = points.len();
    if n < 6 {
        return None;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / n as f64;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n as f64;
    if spread < 1e-12 {
        return None;
    }
    let s = 3f64.sqrt() / spread;
    let mut a = DMatrix::<f64>::zeros((2 * n).max(12), 12);
    for (i, (px, x)) in pixels.iter().zip(points).enumerate() {
        let m = k.normalize(px);
        let y = (x - mean) * s;
        let h = [y.x, y.y, y.z, 1.0];
        for c in 0..4 {
            // row 0: x P3 - P1, row 1: y P3 - P2
            a[(2 * i, c)] = -h[c];
            a[(2 * i, 8 + c)] = m.x * h[c];
            a[(2 * i + 1, 4 + c)] = -h[c];
            a[(2 * i + 1, 8 + c)] = m.y * h[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (idx, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = vt.row(idx);
    let pn = Matrix3x4::from_row_slice(&h.iter().copied().collect::<Vec<_>>());
    // undo the point normalization: P = Pn T
    let mut t = Matrix4::<f64>::identity() * s;
    t[(3, 3)] = 1.0;
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-mean * s));
    let mut p = pn * t;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd = m.svd(true, true);
    let scale = svd.singular_values.mean();
    if scale <= 0.0 {
        return None;
    }
    let r = so3::project_to_rotation(&m);
    let tvec: Vector3<f64> = p.column(3).into_owned() / scale;
    Some(Pose::from_rotation_translation(r, tvec))
}

/// Minimizes the reprojection error of one camera over fixed points.
pub fn refine_pose(pose: &Pose, k: &Intrinsics, pixels: &[Point2<f64>], points: &[Vector3<f64>]) -> Pose {
    let mut problem = BaProblem {
        cameras: vec![BaCamera::free(*pose, *k)],
        points: points
            .iter()
            .map(|&position| BaPoint {
                position,
                fixed: true,
            })
            .collect(),
        observations: pixels
            .iter()
            .enumerate()
            .map(|(i, &pixel)| Observation {
                camera: 0,
                point: i,
                pixel,
            })
            .collect(),
    };
    problem.solve(&LmConfig::default());
    problem.cameras[0].pose
}

/// Reprojection error in pixels, infinite behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, pixel: &Point2<f64>, point: &Vector3<f64>) -> f64 {
    crate::ba::reprojection_residual(pose, k, point, pixel).map_or(f64::INFINITY, |r| r.norm())
}

/// RANSAC adapter for absolute pose from 2D-3D correspondences.
pub struct ResectionEstimator<'a> {
    pub intrinsics: &'a Intrinsics,
    pub pixels: &'a [Point2<f64>],
    pub points: &'a [Vector3<f64>],
}

impl Estimator for ResectionEstimator<'_> {
    type Model = Pose;

    fn sample_size(&self) -> usize {
        6
    }

    fn fit(&self, sample: &[usize]) -> Vec<Pose> {
        let px: Vec<_> = sample.iter().map(|&i| self.pixels[i]).collect();
        let pts: Vec<_> = sample.iter().map(|&i| self.points[i]).collect();
        resection_dlt(self.intrinsics, &px, &pts).into_iter().collect()
    }

    fn residual(&self, pose: &Pose, idx: usize) -> f64 {
        reprojection_error(pose, self.intrinsics, &self.pixels[idx], &self.points[idx])
    }

    fn refit(&self, inliers: &[usize]) -> Option<Pose> {
        let px: Vec<_> = inliers.iter().map(|&i| self.pixels[i]).collect();
        let pts: Vec<_> = inliers.iter().map(|&i| self.points[i]).collect();
        let linear = resection_dlt(self.intrinsics, &px, &pts)?;
        Some(refine_pose(&linear, self.intrinsics, &px, &pts))
    }
}
