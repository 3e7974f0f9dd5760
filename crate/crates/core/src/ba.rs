//! Levenberg-Marquardt bundle adjustment over camera poses and 3D points with
//! fixed intrinsics. Points are eliminated with the Schur complement and the
//! reduced camera system is solved densely.
//!
//! Pose updates are applied on the left, `R <- exp(dθ) R`, with the center
//! updated additively; the six camera parameters are ordered `[dθ, dc]`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Matrix6x3, Point2, SMatrix, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::scene::{Intrinsics, Pose};
use crate::so3;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

#[derive(Debug, Clone, PartialEq)]
pub struct BaCamera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// Parameters held constant, in `[dθ, dc]` order.
    pub fixed: [bool; 6],
}

impl BaCamera {
    pub fn free(pose: Pose, intrinsics: Intrinsics) -> Self {
        Self {
            pose,
            intrinsics,
            fixed: [false; 6],
        }
    }

    pub fn fixed(pose: Pose, intrinsics: Intrinsics) -> Self {
        Self {
            pose,
            intrinsics,
            fixed: [true; 6],
        }
    }

    fn is_fully_fixed(&self) -> bool {
        self.fixed.iter().all(|&f| f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaPoint {
    pub position: Vector3<f64>,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    pub pixel: Point2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaProblem {
    pub cameras: Vec<BaCamera>,
    pub points: Vec<BaPoint>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub function_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_lambda: 1e-3,
            function_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub converged: bool,
}

/// Projection of `point` and its Jacobians with respect to the camera
/// parameters `[dθ, dc]` and the point. `None` if the point is not in front
/// of the camera.
pub fn projection_jacobian(pose: &Pose, k: &Intrinsics, point: &Vector3<f64>) -> Option<(Point2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let p = pose.to_camera(point);
    if p.z <= 0.0 {
        return None;
    }
    let f = k.focal;
    let iz = 1.0 / p.z;
    let proj = Point2::new(f * p.x * iz + k.cx, f * p.y * iz + k.cy);
    let dpi = Matrix2x3::new(f * iz, 0.0, -f * p.x * iz * iz, 0.0, f * iz, -f * p.y * iz * iz);
    let d_theta = -so3::skew(&p);
    let d_center = -pose.rotation;
    let mut jc = Matrix2x6::zeros();
    jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * d_theta));
    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dpi * d_center));
    let jp = dpi * pose.rotation;
    Some((proj, jc, jp))
}

/// Applies a `[dθ, dc]` update.
pub fn apply_pose_update(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let dtheta = Vector3::new(delta[0], delta[1], delta[2]);
    let dc = Vector3::new(delta[3], delta[4], delta[5]);
    Pose {
        rotation: so3::exp(&dtheta) * pose.rotation,
        center: pose.center + dc,
    }
}

/// Reprojection residual `projection - pixel`; `None` behind the camera.
pub fn reprojection_residual(pose: &Pose, k: &Intrinsics, point: &Vector3<f64>, pixel: &Point2<f64>) -> Option<Vector2<f64>> {
    let p = pose.to_camera(point);
    if p.z <= 0.0 {
        return None;
    }
    let u = k.focal * p.x / p.z + k.cx;
    let v = k.focal * p.y / p.z + k.cy;
    Some(Vector2::new(u - pixel.x, v - pixel.y))
}

impl BaProblem {
    /// Sum of squared reprojection errors; infinite if any point is behind
    /// an observing camera.
    pub fn cost(&self) -> f64 {
        self.observations
            .iter()
            .map(|o| {
                let cam = &self.cameras[o.camera];
                reprojection_residual(&cam.pose, &cam.intrinsics, &self.points[o.point].position, &o.pixel)
                    .map_or(f64::INFINITY, |r| r.norm_squared())
            })
            .sum()
    }

    /// Per-observation reprojection error in pixels (infinite behind the camera).
    pub fn observation_errors(&self) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| {
                let cam = &self.cameras[o.camera];
                reprojection_residual(&cam.pose, &cam.intrinsics, &self.points[o.point].position, &o.pixel)
                    .map_or(f64::INFINITY, |r| r.norm())
            })
            .collect()
    }

    pub fn rms(&self) -> f64 {
        if self.observations.is_empty() {
            return 0.0;
        }
        (self.cost() / self.observations.len() as f64).sqrt()
    }

    /// Minimizes the total squared reprojection error. The cost is
    /// non-increasing over accepted steps.
    pub fn solve(&mut self, config: &LmConfig) -> LmReport {
        let mut cost = self.cost();
        let mut report = LmReport {
            initial_cost: cost,
            final_cost: cost,
            iterations: 0,
            accepted_costs: vec![cost],
            converged: false,
        };
        if !cost.is_finite() {
            return report;
        }
        let tiny = 1e-24 * self.observations.len().max(1) as f64;
        if cost <= tiny {
            report.converged = true;
            return report;
        }
        let layout = Layout::new(self);
        if layout.cameras.is_empty() && layout.points.is_empty() {
            report.converged = true;
            return report;
        }
        let mut lambda = config.initial_lambda;
        let mut system = self.linearize(&layout);
        while report.iterations < config.max_iterations {
            if system.max_gradient() < 1e-14 {
                report.converged = true;
                break;
            }
            report.iterations += 1;
            let Some((dc, dp)) = system.solve(lambda) else {
                lambda *= 2.0;
                if lambda > 1e16 {
                    report.converged = true;
                    break;
                }
                continue;
            };
            let trial = self.updated(&layout, &dc, &dp);
            let trial_cost = trial.cost();
            if trial_cost < cost {
                let decrease = (cost - trial_cost) / cost;
                *self = trial;
                cost = trial_cost;
                report.accepted_costs.push(cost);
                lambda = (lambda * 0.5).max(1e-12);
                if decrease < config.function_tolerance || cost <= tiny {
                    report.converged = true;
                    break;
                }
                system = self.linearize(&layout);
            } else {
                lambda *= 2.0;
                if lambda > 1e16 {
                    report.converged = true;
                    break;
                }
            }
        }
        report.final_cost = cost;
        report
    }

    fn updated(&self, layout: &Layout, dc: &[Vector6<f64>], dp: &[Vector3<f64>]) -> BaProblem {
        let mut next = self.clone();
        for (slot, &cam) in layout.cameras.iter().enumerate() {
            next.cameras[cam].pose = apply_pose_update(&self.cameras[cam].pose, &dc[slot]);
        }
        for (slot, &pt) in layout.points.iter().enumerate() {
            next.points[pt].position += dp[slot];
        }
        next
    }

    fn linearize(&self, layout: &Layout) -> NormalSystem {
        let nc = layout.cameras.len();
        let np = layout.points.len();
        let mut u = vec![Matrix6::<f64>::zeros(); nc];
        let mut gc = vec![Vector6::<f64>::zeros(); nc];
        let mut v = vec![Matrix3::<f64>::zeros(); np];
        let mut gp = vec![Vector3::<f64>::zeros(); np];
        // per free point: (camera slot, W block) for each observation by a free camera
        let mut w: Vec<Vec<(usize, Matrix6x3<f64>)>> = vec![Vec::new(); np];
        for o in &self.observations {
            let cs = layout.camera_slot[o.camera];
            let ps = layout.point_slot[o.point];
            if cs.is_none() && ps.is_none() {
                continue;
            }
            let cam = &self.cameras[o.camera];
            let x = &self.points[o.point].position;
            let Some((proj, mut jc, jp)) = projection_jacobian(&cam.pose, &cam.intrinsics, x) else {
                continue;
            };
            let r = Vector2::new(proj.x - o.pixel.x, proj.y - o.pixel.y);
            for (col, &f) in cam.fixed.iter().enumerate() {
                if f {
                    jc.column_mut(col).fill(0.0);
                }
            }
            if let Some(c) = cs {
                u[c] += jc.transpose() * jc;
                gc[c] += jc.transpose() * r;
            }
            if let Some(p) = ps {
                v[p] += jp.transpose() * jp;
                gp[p] += jp.transpose() * r;
                if let Some(c) = cs {
                    w[p].push((c, jc.transpose() * jp));
                }
            }
        }
        let fixed_masks = layout.cameras.iter().map(|&c| self.cameras[c].fixed).collect();
        NormalSystem {
            u,
            gc,
            v,
            gp,
            w,
            fixed_masks,
        }
    }
}

/// Maps problem indices to the slots of free cameras and points.
struct Layout {
    cameras: Vec<usize>,
    points: Vec<usize>,
    camera_slot: Vec<Option<usize>>,
    point_slot: Vec<Option<usize>>,
}

impl Layout {
    fn new(problem: &BaProblem) -> Self {
        let mut observed_cam = vec![false; problem.cameras.len()];
        let mut observed_pt = vec![false; problem.points.len()];
        for o in &problem.observations {
            observed_cam[o.camera] = true;
            observed_pt[o.point] = true;
        }
        let mut cameras = Vec::new();
        let mut camera_slot = vec![None; problem.cameras.len()];
        for (i, c) in problem.cameras.iter().enumerate() {
            if observed_cam[i] && !c.is_fully_fixed() {
                camera_slot[i] = Some(cameras.len());
                cameras.push(i);
            }
        }
        let mut points = Vec::new();
        let mut point_slot = vec![None; problem.points.len()];
        for (i, p) in problem.points.iter().enumerate() {
            if observed_pt[i] && !p.fixed {
                point_slot[i] = Some(points.len());
                points.push(i);
            }
        }
        Self {
            cameras,
            points,
            camera_slot,
            point_slot,
        }
    }
}

struct NormalSystem {
    u: Vec<Matrix6<f64>>,
    gc: Vec<Vector6<f64>>,
    v: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    w: Vec<Vec<(usize, Matrix6x3<f64>)>>,
    fixed_masks: Vec<[bool; 6]>,
}

impl NormalSystem {
    fn max_gradient(&self) -> f64 {
        let c = self.gc.iter().map(|g| g.amax()).fold(0.0, f64::max);
        let p = self.gp.iter().map(|g| g.amax()).fold(0.0, f64::max);
        c.max(p)
    }

    fn damped6(&self, c: usize, lambda: f64) -> Matrix6<f64> {
        let mut a = self.u[c];
        for d in 0..6 {
            if self.fixed_masks[c][d] {
                a.row_mut(d).fill(0.0);
                a.column_mut(d).fill(0.0);
                a[(d, d)] = 1.0;
            } else {
                a[(d, d)] += lambda * a[(d, d)].max(1e-9);
            }
        }
        a
    }

    /// Solves the damped normal equations; `None` if not positive definite.
    fn solve(&self, lambda: f64) -> Option<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
        let nc = self.u.len();
        let np = self.v.len();
        let mut v_inv = Vec::with_capacity(np);
        for v in &self.v {
            let mut a = *v;
            for d in 0..3 {
                a[(d, d)] += lambda * a[(d, d)].max(1e-9);
            }
            v_inv.push(a.try_inverse()?);
        }
        let mut dc = vec![Vector6::zeros(); nc];
        if nc > 0 {
            let n = 6 * nc;
            let mut s = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for c in 0..nc {
                s.fixed_view_mut::<6, 6>(6 * c, 6 * c).copy_from(&self.damped6(c, lambda));
                rhs.fixed_rows_mut::<6>(6 * c).copy_from(&(-self.gc[c]));
            }
            // accumulate the point-eliminated coupling per camera pair
            for p in 0..np {
                let wp = &self.w[p];
                if wp.is_empty() {
                    continue;
                }
                let vi = v_inv[p];
                let vg = vi * self.gp[p];
                let wv: Vec<Matrix6x3<f64>> = wp.iter().map(|(_, w)| w * vi).collect();
                for (a, (ca, _)) in wp.iter().enumerate() {
                    let mut r = rhs.fixed_rows_mut::<6>(6 * ca);
                    r += wp[a].1 * vg;
                    for (cb, wb) in wp.iter() {
                        let block = wv[a] * wb.transpose();
                        let mut view = s.fixed_view_mut::<6, 6>(6 * ca, 6 * cb);
                        view -= block;
                    }
                }
            }
            for (c, mask) in self.fixed_masks.iter().enumerate() {
                for d in 0..6 {
                    if mask[d] {
                        let idx = 6 * c + d;
                        s.row_mut(idx).fill(0.0);
                        s.column_mut(idx).fill(0.0);
                        s[(idx, idx)] = 1.0;
                        rhs[idx] = 0.0;
                    }
                }
            }
            let x = s.cholesky()?.solve(&rhs);
            for c in 0..nc {
                dc[c] = x.fixed_rows::<6>(6 * c).into_owned();
            }
        }
        let mut dp = vec![Vector3::zeros(); np];
        for p in 0..np {
            let mut r = -self.gp[p];
            for (c, w) in &self.w[p] {
                r -= w.transpose() * dc[*c];
            }
            dp[p] = v_inv[p] * r;
        }
        Some((dc, dp))
    }
}

/// Builds a problem from posed cameras keyed by id, points and `(camera id,
/// point index, pixel)` observations. Returns the problem and the camera ids
/// in slot order.
pub fn problem_from_maps(
    poses: &BTreeMap<usize, Pose>,
    intrinsics: &[Intrinsics],
    points: &[Vector3<f64>],
    observations: &[(usize, usize, Point2<f64>)],
) -> (BaProblem, Vec<usize>) {
    let ids: Vec<usize> = poses.keys().copied().collect();
    let slot: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(s, &id)| (id, s)).collect();
    let problem = BaProblem {
        cameras: ids.iter().map(|&id| BaCamera::free(poses[&id], intrinsics[id])).collect(),
        points: points
            .iter()
            .map(|&position| BaPoint {
                position,
                fixed: false,
            })
            .collect(),
        observations: observations
            .iter()
            .map(|&(cam, point, pixel)| Observation {
                camera: slot[&cam],
                point,
                pixel,
            })
            .collect(),
    };
    (problem, ids)
}
