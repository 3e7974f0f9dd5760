//! Rotation helpers: exponential/logarithm maps, skew matrices and projection onto SO(3).

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-16 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + a * k + b * k * k
}

/// Inverse of [`exp`], returning an axis-angle vector with norm in `[0, pi]`.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let theta = (0.5 * w.norm()).atan2(cos);
    if theta < 1e-6 {
        // first order, accurate to O(theta^3)
        return 0.5 * w;
    }
    if std::f64::consts::PI - theta < 1e-4 {
        // near pi the antisymmetric part vanishes; recover the axis from R + I
        let b = (r + Matrix3::identity()) * 0.5;
        let mut best = 0;
        for i in 1..3 {
            if b[(i, i)] > b[(best, best)] {
                best = i;
            }
        }
        let mut axis: Vector3<f64> = b.column(best).into();
        axis /= axis.norm().max(f64::MIN_POSITIVE);
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

/// Geodesic angle between two rotations, radians.
pub fn angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    angle(&(a.transpose() * b))
}

pub fn angle(r: &Matrix3<f64>) -> f64 {
    log(r).norm()
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho < tol && (r.determinant() - 1.0).abs() <= tol
}

/// Nearest rotation in Frobenius norm.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// Uniformly distributed rotation (Haar measure) from a unit quaternion.
pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            let quat = nalgebra::Quaternion::new(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            return *nalgebra::UnitQuaternion::from_quaternion(quat)
                .to_rotation_matrix()
                .matrix();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn exp_log_roundtrip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, scale in 0.0f64..3.1) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-3);
            let omega = v.normalize() * scale;
            let r = exp(&omega);
            prop_assert!(is_rotation(&r, 1e-12));
            prop_assert!((log(&r) - omega).norm() < 1e-8);
        }
    }

    #[test]
    fn log_near_pi() {
        let omega = Vector3::new(0.0, 1.0, 1.0).normalize() * (std::f64::consts::PI - 1e-7);
        let back = log(&exp(&omega));
        assert!((back - omega).norm() < 1e-5, "{back:?}");
    }

    #[test]
    fn projection_fixes_reflections() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        let r = project_to_rotation(&m);
        assert!(is_rotation(&r, 1e-12));
    }
}
