//! Global motion from per-cluster relative motions: robust rotation averaging
//! followed by joint L1 estimation of camera centers and cluster scales.
//!
//! Every relative motion `(R_ij, t_ij^k)` of cluster `k` gives the rotation
//! constraint `R_ij = R_j R_iᵀ` and the linear translation constraint
//! `α_k R_jᵀ t_ij^k = c_i - c_j`. Disconnected motion graphs are solved per
//! component, each with its lowest camera as gauge (`R = I`, `c = 0`) and the
//! lowest cluster touching that camera as unit scale.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::align_similarity;
use crate::local_sfm::{LocalReconstruction, RelativeMotion};
use crate::scene::{CameraId, Pose};
use crate::so3;
use crate::tracks::UnionFind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("no relative motions")]
    Empty,
    #[error("motion ({i}, {j}) references unknown cluster {cluster}")]
    UnknownCluster { i: CameraId, j: CameraId, cluster: usize },
    #[error("motion ({i}, {j}) references camera without rotation estimate")]
    MissingRotation { i: CameraId, j: CameraId },
    #[error("scale of cluster {cluster} collapsed to {alpha}")]
    DegenerateScale { cluster: usize, alpha: f64 },
    #[error("unconstrained cameras {0:?}")]
    UnconstrainedCameras(Vec<CameraId>),
    #[error("unconstrained cluster scales {0:?}")]
    UnconstrainedScales(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct MotionConfig {
    pub rotation_max_iterations: usize,
    pub rotation_tolerance: f64,
    pub l1_max_iterations: usize,
    pub l1_tolerance: f64,
    /// Weight translation equations by their point support.
    pub weight_by_support: bool,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            rotation_max_iterations: 100,
            rotation_tolerance: 1e-8,
            l1_max_iterations: 200,
            l1_tolerance: 1e-10,
            weight_by_support: false,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<(), MotionError> {
        if self.rotation_max_iterations == 0 || self.l1_max_iterations == 0 {
            return Err(MotionError::Config("iteration limits must be positive".into()));
        }
        if !(self.rotation_tolerance > 0.0 && self.l1_tolerance > 0.0) {
            return Err(MotionError::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

const ROTATION_EPS: f64 = 1e-6;
const TRANSLATION_EPS: f64 = 1e-9;
/// Scales at or below this are reported as collapsed. IRLS with the row
/// floor above drives a collapsed scale to about `1e-11`, never to zero.
pub const DEGENERATE_SCALE: f64 = 1e-6;

/// Connected components of the camera pair graph, each sorted, ordered by
/// their lowest camera.
pub fn motion_components(motions: &[RelativeMotion]) -> Vec<Vec<CameraId>> {
    let cameras: BTreeSet<CameraId> = motions.iter().flat_map(|m| [m.i, m.j]).collect();
    let index: BTreeMap<CameraId, usize> = cameras.iter().enumerate().map(|(n, &c)| (c, n)).collect();
    let mut uf = UnionFind::new(cameras.len());
    for m in motions {
        uf.union(index[&m.i], index[&m.j]);
    }
    let mut groups: BTreeMap<usize, Vec<CameraId>> = BTreeMap::new();
    for (&c, &n) in &index {
        groups.entry(uf.find(n)).or_default().push(c);
    }
    let mut comps: Vec<Vec<CameraId>> = groups.into_values().collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationEstimate {
    pub rotations: BTreeMap<CameraId, Matrix3<f64>>,
    pub components: Vec<Vec<CameraId>>,
    pub iterations: usize,
    /// Median of `‖log(R_jᵀ R_ij R_i)‖` over all motions, radians.
    pub median_residual: f64,
}

impl RotationEstimate {
    pub fn component_of(&self, camera: CameraId) -> Option<usize> {
        self.components.iter().position(|c| c.binary_search(&camera).is_ok())
    }
}

pub fn rotation_residual(m: &RelativeMotion, ri: &Matrix3<f64>, rj: &Matrix3<f64>) -> Vector3<f64> {
    so3::log(&(rj.transpose() * m.rotation * ri))
}

/// Propagates rotations along a maximum-support spanning tree of one
/// component; support ties go to edges closing more consistent triangles.
fn spanning_tree_init(comp: &[CameraId], motions: &[&RelativeMotion]) -> BTreeMap<CameraId, Matrix3<f64>> {
    let index: BTreeMap<CameraId, usize> = comp.iter().enumerate().map(|(n, &c)| (c, n)).collect();
    let consistency = triangle_consistency(motions);
    let mut order: Vec<(usize, &RelativeMotion)> = consistency.into_iter().zip(motions.iter().copied()).collect();
    order.sort_by(|(ca, a), (cb, b)| {
        b.support
            .cmp(&a.support)
            .then(cb.cmp(ca))
            .then((a.i, a.j, a.cluster).cmp(&(b.i, b.j, b.cluster)))
    });
    let order: Vec<&RelativeMotion> = order.into_iter().map(|(_, m)| m).collect();
    let mut uf = UnionFind::new(comp.len());
    let mut adj: BTreeMap<CameraId, Vec<(CameraId, Matrix3<f64>)>> = BTreeMap::new();
    for m in order {
        if uf.union(index[&m.i], index[&m.j]) {
            adj.entry(m.i).or_default().push((m.j, m.rotation));
            adj.entry(m.j).or_default().push((m.i, m.rotation.transpose()));
        }
    }
    let mut rot = BTreeMap::from([(comp[0], Matrix3::identity())]);
    let mut stack = vec![comp[0]];
    while let Some(a) = stack.pop() {
        let ra = rot[&a];
        for &(b, rab) in adj.get(&a).map_or(&[][..], |v| v.as_slice()) {
            if let std::collections::btree_map::Entry::Vacant(e) = rot.entry(b) {
                e.insert(so3::project_to_rotation(&(rab * ra)));
                stack.push(b);
            }
        }
    }
    rot
}

const TRIANGLE_TOLERANCE_DEG: f64 = 5.0;

/// Per motion, the number of 3-cycles through it that close within a few
/// degrees. Used to break support ties in the spanning tree.
fn triangle_consistency(motions: &[&RelativeMotion]) -> Vec<usize> {
    let mut rel: BTreeMap<(CameraId, CameraId), Matrix3<f64>> = BTreeMap::new();
    let mut nbrs: BTreeMap<CameraId, BTreeSet<CameraId>> = BTreeMap::new();
    for m in motions {
        rel.entry((m.i, m.j)).or_insert(m.rotation);
        rel.entry((m.j, m.i)).or_insert(m.rotation.transpose());
        nbrs.entry(m.i).or_default().insert(m.j);
        nbrs.entry(m.j).or_default().insert(m.i);
    }
    let tol = TRIANGLE_TOLERANCE_DEG.to_radians();
    motions
        .iter()
        .map(|m| {
            nbrs[&m.i]
                .intersection(&nbrs[&m.j])
                .filter(|&&k| so3::angle_between(&(rel[&(m.j, k)] * m.rotation), &rel[&(m.i, k)]) < tol)
                .count()
        })
        .collect()
}

/// Robust rotation averaging: spanning-tree initialization, then IRLS with
/// L1 weights on the linearized tangent-space residuals `r + ω_i - ω_j`,
/// relinearizing after each L1 solve.
pub fn rotation_averaging(motions: &[RelativeMotion], config: &MotionConfig) -> Result<RotationEstimate, MotionError> {
    if motions.is_empty() {
        return Err(MotionError::Empty);
    }
    let components = motion_components(motions);
    let mut rotations = BTreeMap::new();
    let mut iterations = 0;
    for comp in &components {
        let set: BTreeSet<CameraId> = comp.iter().copied().collect();
        let local: Vec<&RelativeMotion> = motions.iter().filter(|m| set.contains(&m.i)).collect();
        let mut rot = spanning_tree_init(comp, &local);
        let n = comp.len() - 1;
        let index: BTreeMap<CameraId, usize> = comp.iter().enumerate().map(|(n, &c)| (c, n)).collect();
        for it in 0..config.rotation_max_iterations {
            iterations = iterations.max(it + 1);
            if n == 0 {
                break;
            }
            let edges: Vec<(usize, usize, Vector3<f64>)> = local
                .iter()
                .map(|m| (index[&m.i], index[&m.j], rotation_residual(m, &rot[&m.i], &rot[&m.j])))
                .collect();
            let omega = tangent_l1_step(n, &edges).map_err(|p| MotionError::UnconstrainedCameras(vec![comp[p + 1]]))?;
            let mut largest: f64 = 0.0;
            for (x, &c) in comp.iter().enumerate().skip(1) {
                let w = Vector3::new(omega[(x - 1, 0)], omega[(x - 1, 1)], omega[(x - 1, 2)]);
                largest = largest.max(w.norm());
                let r = rot.get_mut(&c).expect("component camera");
                *r = so3::project_to_rotation(&(*r * so3::exp(&w)));
            }
            if largest < config.rotation_tolerance {
                break;
            }
        }
        rotations.extend(rot);
    }
    let mut residuals: Vec<f64> = motions.iter().map(|m| rotation_residual(m, &rotations[&m.i], &rotations[&m.j]).norm()).collect();
    let median_residual = median(&mut residuals);
    debug!("rotation averaging: {} components, median residual {median_residual:.3e} rad", components.len());
    Ok(RotationEstimate {
        rotations,
        components,
        iterations,
        median_residual,
    })
}

/// Weighted least squares `Σ w ‖r + ω_a - ω_b‖²` over the free cameras
/// (index 0 is the gauge).
fn tangent_solve(n: usize, edges: &[(usize, usize, Vector3<f64>)], weights: &[f64]) -> Result<DMatrix<f64>, usize> {
    let mut lap = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, 3);
    for (&(a, b, r), &w) in edges.iter().zip(weights) {
        for (x, sx) in [(a, 1.0), (b, -1.0)] {
            if x == 0 {
                continue;
            }
            for (y, sy) in [(a, 1.0), (b, -1.0)] {
                if y != 0 {
                    lap[(x - 1, y - 1)] += w * sx * sy;
                }
            }
            for d in 0..3 {
                rhs[(x - 1, d)] -= w * sx * r[d];
            }
        }
    }
    cholesky_solve(lap, rhs)
}

/// L1 minimizer of the linearized residuals `r + ω_a - ω_b`, by IRLS started
/// from the unweighted solution.
fn tangent_l1_step(n: usize, edges: &[(usize, usize, Vector3<f64>)]) -> Result<DMatrix<f64>, usize> {
    let at = |omega: &DMatrix<f64>, x: usize| if x == 0 { Vector3::zeros() } else { Vector3::new(omega[(x - 1, 0)], omega[(x - 1, 1)], omega[(x - 1, 2)]) };
    let mut omega = tangent_solve(n, edges, &vec![1.0; edges.len()])?;
    for _ in 0..50 {
        let weights: Vec<f64> = edges
            .iter()
            .map(|&(a, b, r)| 1.0 / (r + at(&omega, a) - at(&omega, b)).norm().max(ROTATION_EPS))
            .collect();
        let next = tangent_solve(n, edges, &weights)?;
        let change = (&next - &omega).abs().max();
        omega = next;
        if change < 1e-10 {
            break;
        }
    }
    Ok(omega)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Dense Cholesky solve; on failure returns the index of the first
/// non-positive pivot.
pub(crate) fn cholesky_solve(mut a: DMatrix<f64>, mut b: DMatrix<f64>) -> Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > tol) {
            return Err(j);
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / d;
        }
    }
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, c)];
            for k in 0..i {
                s -= a[(i, k)] * b[(k, c)];
            }
            b[(i, c)] = s / a[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[(i, c)];
            for k in i + 1..n {
                s -= a[(k, i)] * b[(k, c)];
            }
            b[(i, c)] = s / a[(i, i)];
        }
    }
    Ok(b)
}

/// One 3-row block `α_k p - (c_i - c_j)`, `p = R_jᵀ t_ij^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationEquation {
    pub i: CameraId,
    pub j: CameraId,
    pub cluster: usize,
    /// Column of `cluster` in `A`.
    pub column: usize,
    pub p: Vector3<f64>,
    pub weight: f64,
}

/// The stacked system `A x_s = B y_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationSystem {
    pub equations: Vec<TranslationEquation>,
    /// Cluster id per column of `A`.
    pub clusters: Vec<usize>,
    /// Registered cameras, sorted; column block order of `B`.
    pub cameras: Vec<CameraId>,
    pub components: Vec<Vec<CameraId>>,
}

pub fn build_translation_system(
    motions: &[RelativeMotion],
    rotations: &RotationEstimate,
    known_clusters: &[usize],
    config: &MotionConfig,
) -> Result<TranslationSystem, MotionError> {
    if motions.is_empty() {
        return Err(MotionError::Empty);
    }
    let known: BTreeSet<usize> = known_clusters.iter().copied().collect();
    let mut clusters = BTreeSet::new();
    for m in motions {
        if !known.contains(&m.cluster) {
            return Err(MotionError::UnknownCluster { i: m.i, j: m.j, cluster: m.cluster });
        }
        if !rotations.rotations.contains_key(&m.i) || !rotations.rotations.contains_key(&m.j) {
            return Err(MotionError::MissingRotation { i: m.i, j: m.j });
        }
        clusters.insert(m.cluster);
    }
    let clusters: Vec<usize> = clusters.into_iter().collect();
    let equations = motions
        .iter()
        .map(|m| TranslationEquation {
            i: m.i,
            j: m.j,
            cluster: m.cluster,
            column: clusters.binary_search(&m.cluster).expect("collected"),
            p: rotations.rotations[&m.j].transpose() * m.translation,
            weight: if config.weight_by_support { m.support.max(1) as f64 } else { 1.0 },
        })
        .collect();
    let cameras: Vec<CameraId> = motions.iter().flat_map(|m| [m.i, m.j]).collect::<BTreeSet<_>>().into_iter().collect();
    Ok(TranslationSystem {
        equations,
        clusters,
        cameras,
        components: motion_components(motions),
    })
}

impl TranslationSystem {
    /// Dense `A` (3·equations × clusters).
    pub fn dense_a(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(3 * self.equations.len(), self.clusters.len());
        for (e, eq) in self.equations.iter().enumerate() {
            for d in 0..3 {
                a[(3 * e + d, eq.column)] = eq.p[d];
            }
        }
        a
    }

    /// Dense `B` (3·equations × 3·cameras).
    pub fn dense_b(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(3 * self.equations.len(), 3 * self.cameras.len());
        for (e, eq) in self.equations.iter().enumerate() {
            let ci = self.cameras.binary_search(&eq.i).expect("camera");
            let cj = self.cameras.binary_search(&eq.j).expect("camera");
            for d in 0..3 {
                b[(3 * e + d, 3 * ci + d)] = 1.0;
                b[(3 * e + d, 3 * cj + d)] = -1.0;
            }
        }
        b
    }

    /// Residual vector `α_k p - (c_i - c_j)` of every equation.
    pub fn residuals(&self, centers: &BTreeMap<CameraId, Vector3<f64>>, scales: &BTreeMap<usize, f64>) -> Vec<Vector3<f64>> {
        self.equations
            .iter()
            .map(|eq| scales[&eq.cluster] * eq.p - (centers[&eq.i] - centers[&eq.j]))
            .collect()
    }

    /// `Σ w |r|` over all scalar rows.
    pub fn l1_objective(&self, centers: &BTreeMap<CameraId, Vector3<f64>>, scales: &BTreeMap<usize, f64>) -> f64 {
        self.residuals(centers, scales)
            .iter()
            .zip(&self.equations)
            .map(|(r, eq)| eq.weight * r.abs().sum())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResidualStats {
    pub objective: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMotion {
    pub poses: BTreeMap<CameraId, Pose>,
    pub scales: BTreeMap<usize, f64>,
    /// Norm of each equation residual, in system order.
    pub residuals: Vec<f64>,
    pub stats: ResidualStats,
    pub components: Vec<Vec<CameraId>>,
    /// Objective after each accepted IRLS step, per component.
    pub objective_history: Vec<Vec<f64>>,
}

impl GlobalMotion {
    pub fn centers(&self) -> BTreeMap<CameraId, Vector3<f64>> {
        self.poses.iter().map(|(&c, p)| (c, p.center)).collect()
    }

    /// The component holding the most cameras (lowest camera on ties).
    pub fn largest_component(&self) -> &[CameraId] {
        self.components
            .iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
            .map_or(&[][..], |c| c.as_slice())
    }
}

/// Per-component variable layout.
struct Layout {
    cameras: Vec<CameraId>,
    /// Free clusters (all but the gauge cluster), with their column.
    free_clusters: Vec<usize>,
    gauge_cluster: usize,
    equations: Vec<usize>,
}

impl Layout {
    fn camera_slot(&self, c: CameraId) -> Option<usize> {
        // gauge camera is cameras[0]
        match self.cameras.binary_search(&c) {
            Ok(0) | Err(_) => None,
            Ok(s) => Some(s - 1),
        }
    }

    fn cluster_slot(&self, k: usize) -> Option<usize> {
        self.free_clusters.binary_search(&k).ok()
    }
}

/// Weighted least-squares solve of one component with per-row weights.
fn weighted_solve(
    sys: &TranslationSystem,
    lay: &Layout,
    row_weights: &[[f64; 3]],
) -> Result<(BTreeMap<CameraId, Vector3<f64>>, BTreeMap<usize, f64>), MotionError> {
    let n = lay.cameras.len() - 1;
    let m = lay.free_clusters.len();
    let mut haa = DVector::<f64>::zeros(m);
    let mut ga = DVector::<f64>::zeros(m);
    let mut lap = [DMatrix::<f64>::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
    let mut cross = [DMatrix::<f64>::zeros(n, m), DMatrix::zeros(n, m), DMatrix::zeros(n, m)];
    let mut gc = [DMatrix::<f64>::zeros(n, 1), DMatrix::zeros(n, 1), DMatrix::zeros(n, 1)];
    for (row, &e) in lay.equations.iter().enumerate() {
        let eq = &sys.equations[e];
        let si = lay.camera_slot(eq.i);
        let sj = lay.camera_slot(eq.j);
        let sk = lay.cluster_slot(eq.cluster);
        for d in 0..3 {
            let w = eq.weight * row_weights[row][d];
            let a = eq.p[d];
            // residual = a α_k - c_i + c_j; constant part is a when k is the gauge cluster
            let r0 = if sk.is_none() { a } else { 0.0 };
            let cams = [(si, -1.0), (sj, 1.0)];
            for &(x, jx) in &cams {
                let Some(x) = x else { continue };
                for &(y, jy) in &cams {
                    if let Some(y) = y {
                        lap[d][(x, y)] += w * jx * jy;
                    }
                }
                if let Some(k) = sk {
                    cross[d][(x, k)] += w * jx * a;
                }
                gc[d][(x, 0)] -= w * jx * r0;
            }
            if let Some(k) = sk {
                haa[k] += w * a * a;
                ga[k] -= w * a * r0;
            }
        }
    }
    let mut reduced = DMatrix::from_diagonal(&haa);
    let mut rhs = DMatrix::from_column_slice(m, 1, ga.as_slice());
    let mut solved = Vec::with_capacity(3);
    for d in 0..3 {
        let mut stacked = DMatrix::zeros(n, m + 1);
        stacked.columns_mut(0, m).copy_from(&cross[d]);
        stacked.column_mut(m).copy_from(&gc[d].column(0));
        let x = cholesky_solve(lap[d].clone(), stacked).map_err(|p| MotionError::UnconstrainedCameras(vec![lay.cameras[p + 1]]))?;
        let linv_c = x.columns(0, m).into_owned();
        let linv_g = x.column(m).into_owned();
        reduced -= cross[d].transpose() * &linv_c;
        rhs -= cross[d].transpose() * &linv_g;
        solved.push((linv_c, linv_g));
    }
    let alpha = if m > 0 {
        cholesky_solve(reduced, rhs).map_err(|p| MotionError::UnconstrainedScales(vec![lay.free_clusters[p]]))?
    } else {
        DMatrix::zeros(0, 1)
    };
    let mut centers = BTreeMap::from([(lay.cameras[0], Vector3::zeros())]);
    for (s, &c) in lay.cameras.iter().enumerate().skip(1) {
        let mut v = Vector3::zeros();
        for (d, (linv_c, linv_g)) in solved.iter().enumerate() {
            v[d] = linv_g[s - 1] - (linv_c.row(s - 1) * &alpha)[(0, 0)];
        }
        centers.insert(c, v);
    }
    let mut scales = BTreeMap::from([(lay.gauge_cluster, 1.0)]);
    for (s, &k) in lay.free_clusters.iter().enumerate() {
        scales.insert(k, alpha[(s, 0)]);
    }
    Ok((centers, scales))
}

fn component_layouts(sys: &TranslationSystem) -> Vec<Layout> {
    sys.components
        .iter()
        .map(|comp| {
            let set: BTreeSet<CameraId> = comp.iter().copied().collect();
            let equations: Vec<usize> = (0..sys.equations.len()).filter(|&e| set.contains(&sys.equations[e].i)).collect();
            let gauge_cluster = equations
                .iter()
                .map(|&e| &sys.equations[e])
                .filter(|eq| eq.i == comp[0] || eq.j == comp[0])
                .map(|eq| eq.cluster)
                .min()
                .expect("gauge camera has a motion");
            let free_clusters: Vec<usize> = equations
                .iter()
                .map(|&e| sys.equations[e].cluster)
                .filter(|&k| k != gauge_cluster)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            Layout {
                cameras: comp.clone(),
                free_clusters,
                gauge_cluster,
                equations,
            }
        })
        .collect()
}

fn objective(sys: &TranslationSystem, lay: &Layout, centers: &BTreeMap<CameraId, Vector3<f64>>, scales: &BTreeMap<usize, f64>) -> f64 {
    lay.equations
        .iter()
        .map(|&e| {
            let eq = &sys.equations[e];
            eq.weight * (scales[&eq.cluster] * eq.p - (centers[&eq.i] - centers[&eq.j])).abs().sum()
        })
        .sum()
}

fn assemble(
    sys: &TranslationSystem,
    rotations: &RotationEstimate,
    centers: BTreeMap<CameraId, Vector3<f64>>,
    scales: BTreeMap<usize, f64>,
    iterations: usize,
    objective_history: Vec<Vec<f64>>,
) -> Result<GlobalMotion, MotionError> {
    for (&k, &alpha) in &scales {
        if alpha <= DEGENERATE_SCALE {
            return Err(MotionError::DegenerateScale { cluster: k, alpha });
        }
    }
    let residuals: Vec<f64> = sys.residuals(&centers, &scales).iter().map(|r| r.norm()).collect();
    let mut sorted = residuals.clone();
    let stats = ResidualStats {
        objective: sys.l1_objective(&centers, &scales),
        mean: residuals.iter().sum::<f64>() / residuals.len().max(1) as f64,
        median: median(&mut sorted),
        max: residuals.iter().copied().fold(0.0, f64::max),
        iterations,
    };
    let poses = centers
        .iter()
        .map(|(&c, &center)| {
            let pose = Pose::new(rotations.rotations[&c], center).expect("averaged rotations are orthonormal");
            (c, pose)
        })
        .collect();
    Ok(GlobalMotion {
        poses,
        scales,
        residuals,
        stats,
        components: sys.components.clone(),
        objective_history,
    })
}

/// Minimizes `‖A x_s - B y_c‖_1` by IRLS with row weights `1 / max(|r|, ε)`.
/// The unweighted solution is the starting point; a step that increases the
/// objective ends the iteration.
pub fn solve_translation_l1(sys: &TranslationSystem, rotations: &RotationEstimate, config: &MotionConfig) -> Result<GlobalMotion, MotionError> {
    let mut centers = BTreeMap::new();
    let mut scales = BTreeMap::new();
    let mut iterations = 0;
    let mut history = Vec::new();
    for lay in component_layouts(sys) {
        let ones = vec![[1.0; 3]; lay.equations.len()];
        let (mut c, mut s) = weighted_solve(sys, &lay, &ones)?;
        let mut f = objective(sys, &lay, &c, &s);
        let mut trace = vec![f];
        let floor = 1e-15 * lay.equations.len() as f64 * c.values().map(|v| v.norm()).fold(1.0, f64::max);
        let mut it = 0;
        while it < config.l1_max_iterations && f > floor {
            it += 1;
            let weights: Vec<[f64; 3]> = lay
                .equations
                .iter()
                .map(|&e| {
                    let eq = &sys.equations[e];
                    let r = s[&eq.cluster] * eq.p - (c[&eq.i] - c[&eq.j]);
                    [0, 1, 2].map(|d| 1.0 / r[d].abs().max(TRANSLATION_EPS))
                })
                .collect();
            let (c2, s2) = match weighted_solve(sys, &lay, &weights) {
                Ok(x) => x,
                Err(e) => {
                    warn!("translation IRLS stopped at iteration {it}: {e}");
                    break;
                }
            };
            let f2 = objective(sys, &lay, &c2, &s2);
            if f2 > f {
                break;
            }
            let decrease = f - f2;
            c = c2;
            s = s2;
            f = f2;
            trace.push(f);
            if decrease <= config.l1_tolerance * f {
                break;
            }
        }
        iterations = iterations.max(it);
        history.push(trace);
        centers.extend(c);
        for (k, a) in s {
            scales.entry(k).or_insert(a);
        }
    }
    assemble(sys, rotations, centers, scales, iterations, history)
}

/// Unweighted least-squares solve of the same system.
pub fn solve_translation_l2(sys: &TranslationSystem, rotations: &RotationEstimate) -> Result<GlobalMotion, MotionError> {
    let mut centers = BTreeMap::new();
    let mut scales = BTreeMap::new();
    let mut history = Vec::new();
    for lay in component_layouts(sys) {
        let ones = vec![[1.0; 3]; lay.equations.len()];
        let (c, s) = weighted_solve(sys, &lay, &ones)?;
        history.push(vec![objective(sys, &lay, &c, &s)]);
        centers.extend(c);
        for (k, a) in s {
            scales.entry(k).or_insert(a);
        }
    }
    assemble(sys, rotations, centers, scales, 1, history)
}

/// Rotation averaging followed by L1 translation averaging.
pub fn average_motions(motions: &[RelativeMotion], known_clusters: &[usize], config: &MotionConfig) -> Result<GlobalMotion, MotionError> {
    config.validate()?;
    let rotations = rotation_averaging(motions, config)?;
    let sys = build_translation_system(motions, &rotations, known_clusters, config)?;
    solve_translation_l1(&sys, &rotations, config)
}

/// Baseline without motion averaging: local reconstructions are chained into
/// one frame by similarity transforms estimated from the 3D points of shared
/// tracks. The largest reconstruction is the reference; at each step the
/// reconstruction sharing most tracks with the merged set is attached.
pub fn merge_by_similarity(reconstructions: &[LocalReconstruction]) -> BTreeMap<CameraId, Pose> {
    let mut pending: Vec<&LocalReconstruction> = reconstructions.iter().filter(|r| !r.is_failed() && r.poses.len() >= 2).collect();
    pending.sort_by(|a, b| b.poses.len().cmp(&a.poses.len()).then(a.cluster.cmp(&b.cluster)));
    if pending.is_empty() {
        return BTreeMap::new();
    }
    let first = pending.remove(0);
    let mut poses = first.poses.clone();
    let mut points: BTreeMap<usize, Vector3<f64>> = first.points.iter().map(|p| (p.track, p.position)).collect();
    loop {
        let best = pending
            .iter()
            .enumerate()
            .map(|(n, r)| (n, r.points.iter().filter(|p| points.contains_key(&p.track)).count()))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((n, shared)) = best else { break };
        if shared < 3 {
            break;
        }
        let rec = pending.remove(n);
        let (src, dst): (Vec<_>, Vec<_>) = rec
            .points
            .iter()
            .filter_map(|p| points.get(&p.track).map(|&x| (p.position, x)))
            .unzip();
        let Ok(sim) = align_similarity(&src, &dst) else {
            debug!("cluster {} could not be aligned", rec.cluster);
            continue;
        };
        let moved = rec.transformed(sim.scale, &sim.rotation, &sim.translation);
        for (c, p) in moved.poses {
            poses.entry(c).or_insert(p);
        }
        for p in moved.points {
            points.entry(p.track).or_insert(p.position);
        }
    }
    poses
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: CameraId,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    c: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ScaleRecord {
    cluster_id: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ResidualRecord {
    #[serde(flatten)]
    stats: ResidualStats,
    per_equation: Vec<f64>,
    objective_history: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlobalMotionRecord {
    cameras: Vec<CameraRecord>,
    scales: Vec<ScaleRecord>,
    residuals: ResidualRecord,
    components: Vec<Vec<CameraId>>,
}

impl Serialize for GlobalMotion {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GlobalMotionRecord {
            cameras: self
                .poses
                .iter()
                .map(|(&id, p)| {
                    let r = crate::scene::io::PoseRecord::new(id, p);
                    CameraRecord {
                        id,
                        rotation: r.rotation,
                        c: r.center,
                    }
                })
                .collect(),
            scales: self.scales.iter().map(|(&cluster_id, &alpha)| ScaleRecord { cluster_id, alpha }).collect(),
            residuals: ResidualRecord {
                stats: self.stats,
                per_equation: self.residuals.clone(),
                objective_history: self.objective_history.clone(),
            },
            components: self.components.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GlobalMotion {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = GlobalMotionRecord::deserialize(d)?;
        let mut poses = BTreeMap::new();
        for c in r.cameras {
            let pose = Pose::new(Matrix3::from_row_slice(&c.rotation), Vector3::from_row_slice(&c.c)).map_err(serde::de::Error::custom)?;
            poses.insert(c.id, pose);
        }
        Ok(Self {
            poses,
            scales: r.scales.into_iter().map(|s| (s.cluster_id, s.alpha)).collect(),
            residuals: r.residuals.per_equation,
            stats: r.residuals.stats,
            components: r.components,
            objective_history: r.residuals.objective_history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motion(i: CameraId, j: CameraId, cluster: usize, rotation: Matrix3<f64>, t: Vector3<f64>) -> RelativeMotion {
        RelativeMotion {
            i,
            j,
            cluster,
            rotation,
            translation: t,
            support: 10,
        }
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(cholesky_solve(a, DMatrix::zeros(3, 1)), Err(2));
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let x = cholesky_solve(a.clone(), DMatrix::from_column_slice(2, 1, &[1.0, 2.0])).unwrap();
        assert!((a * x - DMatrix::from_column_slice(2, 1, &[1.0, 2.0])).norm() < 1e-14);
    }

    #[test]
    fn identity_motions_give_identity_rotations() {
        let id = Matrix3::identity();
        let ms = vec![motion(0, 1, 0, id, Vector3::x()), motion(1, 2, 0, id, Vector3::y()), motion(0, 2, 0, id, Vector3::z())];
        let est = rotation_averaging(&ms, &MotionConfig::default()).unwrap();
        for r in est.rotations.values() {
            assert!((r - id).norm() < 1e-15);
        }
    }

    #[test]
    fn json_layout() {
        let ms = vec![motion(0, 1, 4, Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0))];
        let g = average_motions(&ms, &[4], &MotionConfig::default()).unwrap();
        let v = serde_json::to_value(&g).unwrap();
        assert_eq!(v["cameras"][1]["id"], 1);
        assert_eq!(v["cameras"][1]["c"][0], -1.0);
        assert_eq!(v["scales"][0]["clusterId"], 4);
        assert_eq!(v["scales"][0]["alpha"], 1.0);
        assert!(v["residuals"]["perEquation"].is_array());
        let back: GlobalMotion = serde_json::from_value(v).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn unknown_cluster_is_rejected() {
        let ms = vec![motion(0, 1, 7, Matrix3::identity(), Vector3::x())];
        let rot = rotation_averaging(&ms, &MotionConfig::default()).unwrap();
        let err = build_translation_system(&ms, &rot, &[0, 1], &MotionConfig::default()).unwrap_err();
        assert!(matches!(err, MotionError::UnknownCluster { cluster: 7, .. }));
    }
}
