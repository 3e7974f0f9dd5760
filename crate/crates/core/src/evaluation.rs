//! Accuracy metrics against ground truth: similarity alignment, camera
//! position errors, relative rotation/translation errors, epipolar error and
//! structure counts.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{epipolar_distance, fundamental_from_poses};
use crate::scene::{CameraId, Intrinsics, MatchEdge, Pose};
use crate::so3;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("similarity alignment needs at least 3 non-collinear points, got {0}")]
    Degenerate(usize),
    #[error("no camera is posed in both the estimate and the ground truth")]
    NoCommonCameras,
}

/// Largest pairwise distance between points.
pub fn diameter(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (a, p) in points.iter().enumerate() {
        for q in &points[a + 1..] {
            best = best.max((p - q).norm());
        }
    }
    best
}

/// `y = s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        pose.transformed(self.scale, &self.rotation, &self.translation)
    }
}

/// Closed-form least-squares similarity mapping `source` onto `target`.
pub fn align_similarity(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Similarity, EvaluationError> {
    assert_eq!(source.len(), target.len());
    let n = source.len();
    if n < 3 {
        return Err(EvaluationError::Degenerate(n));
    }
    let mx = source.iter().sum::<Vector3<f64>>() / n as f64;
    let my = target.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = x - mx;
        let dy = y - my;
        cov += dy * dx.transpose();
        scatter += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    let eig = scatter.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(EvaluationError::Degenerate(n));
    }
    cov /= n as f64;
    var_x /= n as f64;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let sv = svd.singular_values;
    let trace = sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)];
    let scale = trace / var_x;
    let translation = my - scale * (rotation * mx);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ErrorReport {
    pub mean_position_error: f64,
    pub median_position_error: f64,
    /// Degrees.
    pub mean_rel_rotation_error: f64,
    /// Degrees.
    pub mean_rel_translation_error: f64,
    /// Pixels.
    pub median_epipolar_error: f64,
    pub num_registered: usize,
    pub num_cameras: usize,
    pub num_connected_pairs: usize,
    pub num_points: usize,
    pub num_clusters: usize,
    pub num_evaluated_pairs: usize,
    pub alignment: Similarity,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn angle_between_vectors(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 form stays accurate for nearly parallel vectors
    a.cross(b).norm().atan2(a.dot(b))
}

/// Camera-pose part of the report. `pairs` are the camera pairs over which
/// relative errors are averaged; pairs with an unposed camera are skipped.
/// Structure fields are left at zero.
pub fn pose_error_report(estimate: &[Option<Pose>], gt: &[Option<Pose>], pairs: &[(CameraId, CameraId)]) -> Result<ErrorReport, EvaluationError> {
    let common: Vec<CameraId> = (0..estimate.len().min(gt.len()))
        .filter(|&i| estimate[i].is_some() && gt[i].is_some())
        .collect();
    if common.is_empty() {
        return Err(EvaluationError::NoCommonCameras);
    }
    let src: Vec<_> = common.iter().map(|&i| estimate[i].expect("posed").center).collect();
    let dst: Vec<_> = common.iter().map(|&i| gt[i].expect("posed").center).collect();
    let alignment = align_similarity(&src, &dst)?;
    let mut errors: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (alignment.apply(s) - d).norm()).collect();
    let mean_position_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let median_position_error = median(&mut errors);

    let mut rot_sum = 0.0;
    let mut trans_sum = 0.0;
    let mut evaluated = 0usize;
    for &(i, j) in pairs {
        let (Some(Some(ei)), Some(Some(ej)), Some(Some(gi)), Some(Some(gj))) = (estimate.get(i), estimate.get(j), gt.get(i), gt.get(j)) else {
            continue;
        };
        let r_est = ej.rotation * ei.rotation.transpose();
        let r_gt = gj.rotation * gi.rotation.transpose();
        rot_sum += so3::angle(&(r_est * r_gt.transpose()));
        let t_est = ej.rotation * (ei.center - ej.center);
        let t_gt = gj.rotation * (gi.center - gj.center);
        trans_sum += angle_between_vectors(&t_est, &t_gt);
        evaluated += 1;
    }
    let denom = evaluated.max(1) as f64;
    Ok(ErrorReport {
        mean_position_error,
        median_position_error,
        mean_rel_rotation_error: (rot_sum / denom).to_degrees(),
        mean_rel_translation_error: (trans_sum / denom).to_degrees(),
        median_epipolar_error: 0.0,
        num_registered: estimate.iter().filter(|p| p.is_some()).count(),
        num_cameras: gt.len().max(estimate.len()),
        num_connected_pairs: 0,
        num_points: 0,
        num_clusters: 0,
        num_evaluated_pairs: evaluated,
        alignment,
    })
}

/// Every point-to-epipolar-line distance, in the second image of each pair,
/// over correspondences whose two cameras are posed.
pub fn epipolar_distances(poses: &[Option<Pose>], intrinsics: &[Intrinsics], matches: &[MatchEdge]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in matches {
        let (Some(Some(pi)), Some(Some(pj))) = (poses.get(m.i), poses.get(m.j)) else {
            continue;
        };
        let f = fundamental_from_poses(pi, &intrinsics[m.i], pj, &intrinsics[m.j]);
        for c in &m.correspondences {
            out.push(epipolar_distance(&f, &c.point_i, &c.point_j));
        }
    }
    out
}

/// Median point-to-epipolar-line distance over all evaluated correspondences;
/// `None` when no pair has both cameras posed.
pub fn epipolar_error(poses: &[Option<Pose>], intrinsics: &[Intrinsics], matches: &[MatchEdge]) -> Option<f64> {
    let mut d = epipolar_distances(poses, intrinsics, matches);
    (!d.is_empty()).then(|| median(&mut d))
}

/// Number of distinct camera pairs sharing at least one point, given the
/// observing cameras of each point.
pub fn connected_pairs<'a>(points: impl IntoIterator<Item = &'a [CameraId]>) -> usize {
    let mut pairs = BTreeSet::new();
    for cams in points {
        let set: BTreeSet<CameraId> = cams.iter().copied().collect();
        let v: Vec<_> = set.into_iter().collect();
        for a in 0..v.len() {
            for b in a + 1..v.len() {
                pairs.insert((v[a], v[b]));
            }
        }
    }
    pairs.len()
}

/// Human-readable one-row table of a report.
pub fn format_report(r: &ErrorReport) -> String {
    format!(
        "{:>10} {:>10} {:>10} {:>10} {:>10} {:>6} {:>8} {:>8} {:>4}\n{:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>6} {:>8} {:>8} {:>4}",
        "x_mean",
        "x_median",
        "dR_mean",
        "dt_mean",
        "epi_med",
        "N_c",
        "pairs",
        "points",
        "N_s",
        r.mean_position_error,
        r.median_position_error,
        r.mean_rel_rotation_error,
        r.mean_rel_translation_error,
        r.median_epipolar_error,
        r.num_registered,
        r.num_connected_pairs,
        r.num_points,
        r.num_clusters
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect()
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_points(&mut rng, 10);
        let s = align_similarity(&p, &p).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!((s.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_inverse_of_applied_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_points(&mut rng, 12);
        let q = so3::random(&mut rng);
        let d = Vector3::new(1.0, -2.0, 3.0);
        let est: Vec<_> = gt.iter().map(|x| 2.0 * (q * x) + d).collect();
        let s = align_similarity(&est, &gt).unwrap();
        assert!((s.scale - 0.5).abs() < 1e-10);
        assert!((s.rotation - q.transpose()).norm() < 1e-10);
        assert!((s.translation - (-0.5 * (q.transpose() * d))).norm() < 1e-10);
    }

    #[test]
    fn two_points_are_degenerate() {
        let p = vec![Vector3::zeros(), Vector3::x()];
        assert_eq!(align_similarity(&p, &p), Err(EvaluationError::Degenerate(2)));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(align_similarity(&line, &line).is_err());
    }

    #[test]
    fn one_degree_rotation_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<Option<Pose>> = random_points(&mut rng, 5)
            .into_iter()
            .map(|c| Some(Pose::new(so3::random(&mut rng), c).unwrap()))
            .collect();
        let mut est = gt.clone();
        let p = est[0].as_mut().unwrap();
        p.rotation = so3::exp(&Vector3::new(0.0, 0.0, 1f64.to_radians())) * p.rotation;
        let pairs = [(0, 1), (0, 2), (1, 2), (3, 4)];
        let r = pose_error_report(&est, &gt, &pairs).unwrap();
        assert!((r.mean_rel_rotation_error - 2.0 / 4.0).abs() < 1e-9);
        assert!(r.mean_position_error < 1e-9);
    }

    #[test]
    fn connected_pair_count() {
        let a = [0usize, 1, 2];
        let b = [1usize, 2];
        assert_eq!(connected_pairs([&a[..], &b[..]]), 3);
    }
}
