use nalgebra::{DMatrix, Matrix3, Point2, Vector2, Vector3};

use super::ransac::Estimator;
use crate::scene::{Intrinsics, Pose};
use crate::so3::skew;

/// Hartley normalization: centroid to origin, mean distance sqrt(2).
fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector2<f64>>() / n;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 1e-15 { 2f64.sqrt() / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

/// Linear 8-point estimate of `E` with `x2ᵀ E x1 = 0` on normalized image
/// coordinates, projected onto the essential manifold.
pub fn essential_eight_point(x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    essential_weighted(x1, x2, None)
}

/// Iteratively reweighted 8-point fit whose row weights approximate the
/// Sampson error, refining an initial linear estimate.
pub fn essential_sampson_refit(x1: &[Vector2<f64>], x2: &[Vector2<f64>], iterations: usize) -> Option<Matrix3<f64>> {
    let mut e = essential_weighted(x1, x2, None)?;
    for _ in 0..iterations {
        let w: Vec<f64> = x1
            .iter()
            .zip(x2)
            .map(|(p, q)| {
                let p = Vector3::new(p.x, p.y, 1.0);
                let q = Vector3::new(q.x, q.y, 1.0);
                let ep = e * p;
                let etq = e.transpose() * q;
                let den = ep.x * ep.x + ep.y * ep.y + etq.x * etq.x + etq.y * etq.y;
                1.0 / den.max(1e-18).sqrt()
            })
            .collect();
        e = essential_weighted(x1, x2, Some(&w))?;
    }
    Some(e)
}

fn essential_weighted(x1: &[Vector2<f64>], x2: &[Vector2<f64>], weights: Option<&[f64]>) -> Option<Matrix3<f64>> {
    assert_eq!(x1.len(), x2.len());
    if x1.len() < 8 {
        return None;
    }
    let t1 = normalizing_transform(x1);
    let t2 = normalizing_transform(x2);
    let rows = x1.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (p, q)) in x1.iter().zip(x2).enumerate() {
        let p = t1 * Vector3::new(p.x, p.y, 1.0);
        let q = t2 * Vector3::new(q.x, q.y, 1.0);
        let w = weights.map_or(1.0, |w| w[k]);
        for r in 0..3 {
            for c in 0..3 {
                a[(k, 3 * r + c)] = w * q[r] * p[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = vt.row(idx);
    let en = Matrix3::from_row_slice(&[h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]]);
    let e = t2.transpose() * en * t1;
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let e = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt;
    let norm = e.norm();
    (norm > 0.0).then(|| e / norm)
}

/// The four `(R, t)` candidates of an essential matrix, `x2 = R x1 + t`, `|t| = 1`.
pub fn decompose_essential(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("u requested");
    let mut vt = svd.v_t.expect("v requested");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Depths of the midpoint triangulation of one correspondence in both frames.
fn two_view_depths(r: &Matrix3<f64>, t: &Vector3<f64>, p: &Vector2<f64>, q: &Vector2<f64>) -> (f64, f64) {
    // d2 q = d1 R p + t, solved in least squares for (d1, d2)
    let a = r * Vector3::new(p.x, p.y, 1.0);
    let b = Vector3::new(q.x, q.y, 1.0);
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let (at, bt) = (a.dot(t), b.dot(t));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-15 {
        return (0.0, 0.0);
    }
    let d1 = (ab * bt - bb * at) / det;
    let d2 = (aa * bt - ab * at) / det;
    (d1, d2)
}

/// Picks the decomposition with the most correspondences in front of both cameras.
pub fn recover_pose(e: &Matrix3<f64>, x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> (Matrix3<f64>, Vector3<f64>, usize) {
    decompose_essential(e)
        .into_iter()
        .map(|(r, t)| {
            let good = x1
                .iter()
                .zip(x2)
                .filter(|(p, q)| {
                    let (d1, d2) = two_view_depths(&r, &t, p, q);
                    d1 > 0.0 && d2 > 0.0
                })
                .count();
            (r, t, good)
        })
        .fold(None, |best: Option<(Matrix3<f64>, Vector3<f64>, usize)>, cand| match best {
            Some(b) if b.2 >= cand.2 => Some(b),
            _ => Some(cand),
        })
        .expect("four candidates")
}

/// `F = K2⁻ᵀ E K1⁻¹`.
pub fn fundamental_from_essential(e: &Matrix3<f64>, k1: &Intrinsics, k2: &Intrinsics) -> Matrix3<f64> {
    k2.inverse_matrix().transpose() * e * k1.inverse_matrix()
}

/// Fundamental matrix induced by two posed cameras.
pub fn fundamental_from_poses(p1: &Pose, k1: &Intrinsics, p2: &Pose, k2: &Intrinsics) -> Matrix3<f64> {
    let r = p2.rotation * p1.rotation.transpose();
    let t = p2.rotation * (p1.center - p2.center);
    fundamental_from_essential(&(skew(&t) * r), k1, k2)
}

/// First-order geometric error of `x2ᵀ F x1 = 0`, in pixels.
pub fn sampson_distance(f: &Matrix3<f64>, x1: &Point2<f64>, x2: &Point2<f64>) -> f64 {
    let p = Vector3::new(x1.x, x1.y, 1.0);
    let q = Vector3::new(x2.x, x2.y, 1.0);
    let fp = f * p;
    let ftq = f.transpose() * q;
    let num = q.dot(&fp);
    let den = fp.x * fp.x + fp.y * fp.y + ftq.x * ftq.x + ftq.y * ftq.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

/// Distance from `x2` to the epipolar line `F x1`, in pixels.
pub fn epipolar_distance(f: &Matrix3<f64>, x1: &Point2<f64>, x2: &Point2<f64>) -> f64 {
    let l = f * Vector3::new(x1.x, x1.y, 1.0);
    let den = (l.x * l.x + l.y * l.y).sqrt();
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (l.x * x2.x + l.y * x2.y + l.z).abs() / den
}

/// RANSAC adapter: essential matrix from pixel correspondences, scored by
/// Sampson distance in pixels.
pub struct EssentialEstimator<'a> {
    pub k1: &'a Intrinsics,
    pub k2: &'a Intrinsics,
    pub pixels1: &'a [Point2<f64>],
    pub pixels2: &'a [Point2<f64>],
    pub normalized1: Vec<Vector2<f64>>,
    pub normalized2: Vec<Vector2<f64>>,
}

impl<'a> EssentialEstimator<'a> {
    pub fn new(k1: &'a Intrinsics, k2: &'a Intrinsics, pixels1: &'a [Point2<f64>], pixels2: &'a [Point2<f64>]) -> Self {
        Self {
            k1,
            k2,
            pixels1,
            pixels2,
            normalized1: pixels1.iter().map(|p| k1.normalize(p)).collect(),
            normalized2: pixels2.iter().map(|p| k2.normalize(p)).collect(),
        }
    }
}

impl Estimator for EssentialEstimator<'_> {
    /// `(E, F)`.
    type Model = (Matrix3<f64>, Matrix3<f64>);

    fn sample_size(&self) -> usize {
        8
    }

    fn fit(&self, sample: &[usize]) -> Vec<Self::Model> {
        let a: Vec<_> = sample.iter().map(|&i| self.normalized1[i]).collect();
        let b: Vec<_> = sample.iter().map(|&i| self.normalized2[i]).collect();
        essential_eight_point(&a, &b)
            .map(|e| (e, fundamental_from_essential(&e, self.k1, self.k2)))
            .into_iter()
            .collect()
    }

    fn residual(&self, model: &Self::Model, idx: usize) -> f64 {
        sampson_distance(&model.1, &self.pixels1[idx], &self.pixels2[idx])
    }

    fn refit(&self, inliers: &[usize]) -> Option<Self::Model> {
        let a: Vec<_> = inliers.iter().map(|&i| self.normalized1[i]).collect();
        let b: Vec<_> = inliers.iter().map(|&i| self.normalized2[i]).collect();
        essential_sampson_refit(&a, &b, 3).map(|e| (e, fundamental_from_essential(&e, self.k1, self.k2)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::project_point;
    use crate::so3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eight_point_recovers_relative_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = Intrinsics::new(500.0, 320.0, 240.0, 640, 480).unwrap();
        let p1 = Pose::identity();
        let r = so3::exp(&Vector3::new(0.02, -0.1, 0.03));
        let p2 = Pose::new(r, Vector3::new(1.0, 0.1, -0.2)).unwrap();
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        while x1.len() < 40 {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0));
            if let (Ok(a), Ok(b)) = (project_point(&p1, &k, &x), project_point(&p2, &k, &x)) {
                x1.push(k.normalize(&a));
                x2.push(k.normalize(&b));
            }
        }
        let e = essential_eight_point(&x1, &x2).unwrap();
        let (rr, t, good) = recover_pose(&e, &x1, &x2);
        assert_eq!(good, 40);
        assert!(so3::angle_between(&rr, &r) < 1e-9);
        let t_true = (p2.rotation * (p1.center - p2.center)).normalize();
        assert!(t.dot(&t_true) > 1.0 - 1e-12);
        let f = fundamental_from_poses(&p1, &k, &p2, &k);
        let a = k.denormalize(&x1[0]);
        let b = k.denormalize(&x2[0]);
        assert!(epipolar_distance(&f, &a, &b) < 1e-9);
        assert!(sampson_distance(&f, &a, &b) < 1e-9);
    }

    #[test]
    fn decompositions_are_rotations() {
        let e = skew(&Vector3::new(1.0, 0.0, 0.0)) * so3::exp(&Vector3::new(0.1, 0.2, 0.3));
        for (r, t) in decompose_essential(&e) {
            assert!(so3::is_rotation(&r, 1e-9));
            assert!((t.norm() - 1.0).abs() < 1e-12);
        }
    }
}
