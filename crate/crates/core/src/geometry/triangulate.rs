use nalgebra::{DMatrix, Point2, Vector3};
use thiserror::Error;

use crate::scene::{project_point, Intrinsics, Pose};

/// One view of a point to triangulate.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub pose: &'a Pose,
    pub intrinsics: &'a Intrinsics,
    pub pixel: Point2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum TriangulationError {
    #[error("fewer views than required")]
    TooFewViews,
    #[error("triangulation angle {0:.3} deg below threshold")]
    LowParallax(f64),
    #[error("point is not in front of every camera")]
    Cheirality,
    #[error("reprojection error {0:.3} px above threshold")]
    Reprojection(f64),
    #[error("degenerate linear system")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationCheck {
    pub min_views: usize,
    pub min_angle_deg: f64,
    pub max_reprojection_px: f64,
}

impl TriangulationCheck {
    pub fn new(min_views: usize, min_angle_deg: f64, max_reprojection_px: f64) -> Self {
        Self {
            min_views,
            min_angle_deg,
            max_reprojection_px,
        }
    }
}

/// World-frame bearing of a pixel.
pub fn bearing(pose: &Pose, intrinsics: &Intrinsics, pixel: &Point2<f64>) -> Vector3<f64> {
    let n = intrinsics.normalize(pixel);
    (pose.rotation.transpose() * Vector3::new(n.x, n.y, 1.0)).normalize()
}

/// Largest angle in degrees between any two viewing rays.
pub fn max_ray_angle(views: &[View]) -> f64 {
    let rays: Vec<_> = views.iter().map(|v| bearing(v.pose, v.intrinsics, &v.pixel)).collect();
    let mut best: f64 = 0.0;
    for a in 0..rays.len() {
        for b in a + 1..rays.len() {
            best = best.max(rays[a].dot(&rays[b]).clamp(-1.0, 1.0).acos());
        }
    }
    best.to_degrees()
}

/// Angle in degrees subtended at `point` by two camera centers.
pub fn triangulation_angle(point: &Vector3<f64>, c1: &Vector3<f64>, c2: &Vector3<f64>) -> f64 {
    let a = (c1 - point).normalize();
    let b = (c2 - point).normalize();
    a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Linear multi-view triangulation: homogeneous least squares over the stacked
/// cross-product constraints, in normalized image coordinates and a frame
/// centered on the cameras for conditioning.
pub fn triangulate_dlt(views: &[View]) -> Result<Vector3<f64>, TriangulationError> {
    if views.len() < 2 {
        return Err(TriangulationError::TooFewViews);
    }
    let origin = views.iter().map(|v| v.pose.center).sum::<Vector3<f64>>() / views.len() as f64;
    let scale = views
        .iter()
        .map(|v| (v.pose.center - origin).norm())
        .fold(0.0, f64::max)
        .max(1e-12);
    let rows = (2 * views.len()).max(4);
    let mut a = DMatrix::<f64>::zeros(rows, 4);
    for (k, v) in views.iter().enumerate() {
        let n = v.intrinsics.normalize(&v.pixel);
        let r = &v.pose.rotation;
        // x_cam = R (s Y + o - c) with X = s Y + o; homogeneous in Y
        let t = r * (origin - v.pose.center) / scale;
        let p = |i: usize| [r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]];
        let (p0, p1, p2) = (p(0), p(1), p(2));
        for c in 0..4 {
            a[(2 * k, c)] = n.x * p2[c] - p0[c];
            a[(2 * k + 1, c)] = n.y * p2[c] - p1[c];
        }
        let norm0 = a.row(2 * k).norm().max(1e-300);
        let norm1 = a.row(2 * k + 1).norm().max(1e-300);
        a.row_mut(2 * k).scale_mut(1.0 / norm0);
        a.row_mut(2 * k + 1).scale_mut(1.0 / norm1);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(TriangulationError::Degenerate)?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .ok_or(TriangulationError::Degenerate)?;
    let h = vt.row(min_idx);
    if h[3].abs() < 1e-14 {
        return Err(TriangulationError::Degenerate);
    }
    let y = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    Ok(y * scale + origin)
}

/// Largest reprojection error over `views`; `None` if any depth is not positive.
pub fn max_reprojection_error(point: &Vector3<f64>, views: &[View]) -> Option<f64> {
    let mut worst: f64 = 0.0;
    for v in views {
        let px = project_point(v.pose, v.intrinsics, point).ok()?;
        worst = worst.max((px - v.pixel).norm());
    }
    Some(worst)
}

/// DLT triangulation followed by parallax, cheirality and reprojection checks.
pub fn triangulate_checked(views: &[View], check: &TriangulationCheck) -> Result<Vector3<f64>, TriangulationError> {
    if views.len() < check.min_views.max(2) {
        return Err(TriangulationError::TooFewViews);
    }
    let angle = max_ray_angle(views);
    if angle < check.min_angle_deg {
        return Err(TriangulationError::LowParallax(angle));
    }
    let x = triangulate_dlt(views)?;
    let err = max_reprojection_error(&x, views).ok_or(TriangulationError::Cheirality)?;
    if err > check.max_reprojection_px {
        return Err(TriangulationError::Reprojection(err));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn unit_intrinsics() -> Intrinsics {
        Intrinsics {
            focal: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 2,
            height: 2,
        }
    }

    #[test]
    fn two_identity_cameras() {
        let k = unit_intrinsics();
        let p1 = Pose::new(Matrix3::identity(), Vector3::new(-0.5, 0.0, 0.0)).unwrap();
        let p2 = Pose::new(Matrix3::identity(), Vector3::new(0.5, 0.0, 0.0)).unwrap();
        let x = Vector3::new(0.0, 0.0, 2.0);
        let views = [
            View {
                pose: &p1,
                intrinsics: &k,
                pixel: project_point(&p1, &k, &x).unwrap(),
            },
            View {
                pose: &p2,
                intrinsics: &k,
                pixel: project_point(&p2, &k, &x).unwrap(),
            },
        ];
        let est = triangulate_dlt(&views).unwrap();
        assert!((est - x).norm() < 1e-9);
        let checked = triangulate_checked(&views, &TriangulationCheck::new(2, 1.0, 4.0)).unwrap();
        assert!((checked - x).norm() < 1e-9);
    }

    #[test]
    fn point_behind_a_camera_is_rejected() {
        let k = unit_intrinsics();
        let p1 = Pose::new(Matrix3::identity(), Vector3::new(-0.5, 0.0, 0.0)).unwrap();
        // second camera looks the other way
        let flip = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let p2 = Pose::new(flip, Vector3::new(0.5, 0.0, 0.0)).unwrap();
        let x = Vector3::new(0.0, 0.0, 2.0);
        let cam2 = p2.to_camera(&x);
        let views = [
            View {
                pose: &p1,
                intrinsics: &k,
                pixel: project_point(&p1, &k, &x).unwrap(),
            },
            View {
                pose: &p2,
                intrinsics: &k,
                pixel: Point2::new(cam2.x / cam2.z, cam2.y / cam2.z),
            },
        ];
        assert_eq!(
            triangulate_checked(&views, &TriangulationCheck::new(2, 0.0, 4.0)),
            Err(TriangulationError::Cheirality)
        );
    }

    #[test]
    fn low_parallax_is_rejected() {
        let k = unit_intrinsics();
        let p1 = Pose::identity();
        let p2 = Pose::new(Matrix3::identity(), Vector3::new(1e-3, 0.0, 0.0)).unwrap();
        let x = Vector3::new(0.0, 0.0, 10.0);
        let views = [
            View {
                pose: &p1,
                intrinsics: &k,
                pixel: project_point(&p1, &k, &x).unwrap(),
            },
            View {
                pose: &p2,
                intrinsics: &k,
                pixel: project_point(&p2, &k, &x).unwrap(),
            },
        ];
        assert!(matches!(
            triangulate_checked(&views, &TriangulationCheck::new(2, 1.0, 4.0)),
            Err(TriangulationError::LowParallax(_))
        ));
    }
}
