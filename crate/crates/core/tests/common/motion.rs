use std::collections::{BTreeMap, BTreeSet};

use csfm_core::local_sfm::RelativeMotion;
use csfm_core::so3;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;

/// Ground truth world plus per-cluster similarity gauges: cluster k sees the
/// world through `x -> s_k Q_k x + d_k`.
pub struct MotionProblem {
    pub rotations: Vec<Matrix3<f64>>,
    pub centers: Vec<Vector3<f64>>,
    pub scales: Vec<f64>,
    pub motions: Vec<RelativeMotion>,
}

/// Motion of pair (i, j) in a cluster whose local frame has scale `s`.
/// Rotation is unaffected by the similarity; translation scales by `s`.
pub fn motion_in_cluster(r: &[Matrix3<f64>], c: &[Vector3<f64>], i: usize, j: usize, k: usize, s: f64) -> RelativeMotion {
    RelativeMotion {
        i,
        j,
        cluster: k,
        rotation: r[j] * r[i].transpose(),
        translation: s * (r[j] * (c[i] - c[j])),
        support: 50,
    }
}

fn random_center<R: Rng>(rng: &mut R, half: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half))
}

/// Cameras split into overlapping contiguous ranges, one per scale; inside a
/// range each camera is linked to its next three neighbours plus random chords.
pub fn clustered_problem<R: Rng>(rng: &mut R, cameras: usize, scales: &[f64], overlap: usize) -> MotionProblem {
    let rotations: Vec<_> = (0..cameras).map(|_| so3::random(rng)).collect();
    let centers: Vec<_> = (0..cameras).map(|_| random_center(rng, 10.0)).collect();
    let m = scales.len();
    let base = cameras / m;
    let mut motions = Vec::new();
    for (k, &s) in scales.iter().enumerate() {
        let lo = (k * base).saturating_sub(overlap);
        let hi = if k + 1 == m { cameras } else { ((k + 1) * base + overlap).min(cameras) };
        let mut pairs = BTreeSet::new();
        for i in lo..hi {
            for j in i + 1..(i + 4).min(hi) {
                pairs.insert((i, j));
            }
        }
        for _ in 0..(hi - lo) {
            let i = rng.random_range(lo..hi);
            let j = rng.random_range(lo..hi);
            if i != j {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
        motions.extend(pairs.into_iter().map(|(i, j)| motion_in_cluster(&rotations, &centers, i, j, k, s)));
    }
    MotionProblem {
        rotations,
        centers,
        scales: scales.to_vec(),
        motions,
    }
}

/// Random pose graph with a guaranteed spanning path; single cluster.
pub fn rotation_graph<R: Rng>(rng: &mut R, cameras: usize, edges: usize) -> MotionProblem {
    let rotations: Vec<_> = (0..cameras).map(|_| so3::random(rng)).collect();
    let centers: Vec<_> = (0..cameras).map(|_| random_center(rng, 5.0)).collect();
    let mut pairs = BTreeSet::new();
    for i in 0..cameras - 1 {
        pairs.insert((i, i + 1));
    }
    while pairs.len() < edges {
        let i = rng.random_range(0..cameras);
        let j = rng.random_range(0..cameras);
        if i != j {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let motions = pairs.into_iter().map(|(i, j)| motion_in_cluster(&rotations, &centers, i, j, 0, 1.0)).collect();
    MotionProblem {
        rotations,
        centers,
        scales: vec![1.0],
        motions,
    }
}

/// Angular errors after removing the global rotation gauge. The alignment
/// `G` (with `R_est ≈ R_gt G`) is taken from the camera whose induced
/// alignment minimizes the median error, so a badly estimated gauge camera
/// does not bias the result.
pub fn rotation_errors(est: &BTreeMap<usize, Matrix3<f64>>, gt: &[Matrix3<f64>]) -> Vec<f64> {
    let errors = |g: &Matrix3<f64>| -> Vec<f64> { est.iter().map(|(&c, r)| so3::angle_between(r, &(gt[c] * g))).collect() };
    est.iter()
        .map(|(&c, r)| errors(&(gt[c].transpose() * r)))
        .min_by(|a, b| median(a.clone()).total_cmp(&median(b.clone())))
        .unwrap_or_default()
}

/// Expected estimated center under the gauge `c_0 = 0`, `R_0 = I` and unit
/// scale for a gauge cluster of scale `gauge_scale`: `s_g R_0 (c_i - c_0)`.
pub fn expected_center(p: &MotionProblem, gauge_scale: f64, i: usize) -> Vector3<f64> {
    gauge_scale * (p.rotations[0] * (p.centers[i] - p.centers[0]))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Replaces the direction of `count` random translations, keeping their length.
pub fn corrupt_directions<R: Rng>(rng: &mut R, motions: &mut [RelativeMotion], count: usize) {
    for idx in rand::seq::index::sample(rng, motions.len(), count) {
        let m = &mut motions[idx];
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        m.translation = m.translation.norm() * dir;
    }
}
