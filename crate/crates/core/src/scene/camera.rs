use nalgebra::{Matrix3, Matrix3x4, Point2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::so3;

/// Dense camera index, contiguous from 0.
pub type CameraId = usize;

/// Pinhole intrinsics with square pixels and no distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, SceneError> {
        let k = Self {
            focal,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(SceneError::InvalidIntrinsics(format!(
                "focal length must be positive, got {}",
                self.focal
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&self.cx) || !(0.0..=h).contains(&self.cy) {
            return Err(SceneError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal, 0.0, self.cx, //
            0.0, self.focal, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let f = 1.0 / self.focal;
        Matrix3::new(
            f,
            0.0,
            -self.cx * f,
            0.0,
            f,
            -self.cy * f,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel to normalized image coordinates (unit focal, origin at the principal point).
    pub fn normalize(&self, pixel: &Point2<f64>) -> Vector2<f64> {
        Vector2::new(
            (pixel.x - self.cx) / self.focal,
            (pixel.y - self.cy) / self.focal,
        )
    }

    pub fn denormalize(&self, normalized: &Vector2<f64>) -> Point2<f64> {
        Point2::new(
            normalized.x * self.focal + self.cx,
            normalized.y * self.focal + self.cy,
        )
    }

    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: CameraId,
    pub intrinsics: Intrinsics,
}

/// World-to-camera rotation plus camera center: `x_cam = R (X - c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, SceneError> {
        if !so3::is_rotation(&rotation, 1e-9) {
            return Err(SceneError::InvalidRotation);
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    /// Builds a pose looking from `center` towards `target` with the camera y axis
    /// pointing roughly along `-up`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::x());
            if x.norm() < 1e-9 {
                x = z.cross(&Vector3::y());
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self { rotation, center }
    }

    /// `t = -R c`, the translation of the `[R | t]` form.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            center: -(rotation.transpose() * translation),
        }
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (world - self.center)
    }

    /// `P = K [R | -R c]`.
    pub fn projection_matrix(&self, intrinsics: &Intrinsics) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation());
        intrinsics.matrix() * rt
    }

    /// Viewing direction of the optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Applies a world similarity `X' = s Q X + d` to the pose.
    pub fn transformed(&self, scale: f64, q: &Matrix3<f64>, d: &Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation * q.transpose(),
            center: scale * (q * self.center) + d,
        }
    }
}

/// Perspective projection `K [R | -R c] X` in pixels.
pub fn project_point(
    pose: &Pose,
    intrinsics: &Intrinsics,
    point: &Vector3<f64>,
) -> Result<Point2<f64>, SceneError> {
    let cam = pose.to_camera(point);
    if cam.z <= 0.0 {
        return Err(SceneError::BehindCamera { depth: cam.z });
    }
    Ok(Point2::new(
        intrinsics.focal * cam.x / cam.z + intrinsics.cx,
        intrinsics.focal * cam.y / cam.z + intrinsics.cy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn intr(focal: f64, cx: f64, cy: f64) -> Intrinsics {
        Intrinsics {
            focal,
            cx,
            cy,
            width: 1000,
            height: 1000,
        }
    }

    #[test]
    fn identity_projection_hits_principal_point() {
        let p = project_point(&Pose::identity(), &intr(1.0, 0.0, 0.0), &Vector3::new(0.0, 0.0, 1.0))
            .unwrap();
        assert_eq!(p, Point2::new(0.0, 0.0));
    }

    #[test]
    fn hand_evaluated_projection() {
        let p = project_point(
            &Pose::identity(),
            &intr(2.0, 100.0, 100.0),
            &Vector3::new(1.0, 1.0, 2.0),
        )
        .unwrap();
        assert_relative_eq!(p.x, 101.0);
        assert_relative_eq!(p.y, 101.0);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let pose = Pose {
            rotation: Matrix3::identity(),
            center: Vector3::new(0.0, 0.0, 5.0),
        };
        let err = project_point(&pose, &intr(1.0, 0.0, 0.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap_err();
        match err {
            SceneError::BehindCamera { depth } => assert_relative_eq!(depth, -4.0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 10, 10).is_err());
        assert!(Intrinsics::new(5.0, 11.0, 1.0, 10, 10).is_err());
        assert!(Intrinsics::new(5.0, 5.0, 5.0, 10, 10).is_ok());
    }

    #[test]
    fn projection_matrix_agrees_with_projection() {
        let pose = Pose::look_at(
            Vector3::new(1.0, -2.0, 0.5),
            Vector3::new(0.0, 0.0, 4.0),
            Vector3::y(),
        );
        let k = intr(400.0, 320.0, 240.0);
        let x = Vector3::new(0.3, 0.1, 3.5);
        let direct = project_point(&pose, &k, &x).unwrap();
        let h = pose.projection_matrix(&k) * x.push(1.0);
        assert_relative_eq!(direct.x, h.x / h.z, epsilon = 1e-9);
        assert_relative_eq!(direct.y, h.y / h.z, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn projection_invariant_under_rigid_transform(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            shift in prop::array::uniform3(-10.0f64..10.0),
            px in -1.0f64..1.0, py in -1.0f64..1.0, pz in 2.0f64..10.0,
        ) {
            let pose = Pose::look_at(Vector3::new(0.2, -0.1, 0.0), Vector3::new(0.0, 0.0, 5.0), Vector3::y());
            let k = intr(500.0, 500.0, 500.0);
            let x = Vector3::new(px, py, pz);
            let before = project_point(&pose, &k, &x).unwrap();

            let axis = Vector3::from(axis);
            let q = if axis.norm() > 1e-6 { so3::exp(&(axis.normalize() * angle)) } else { Matrix3::identity() };
            let d = Vector3::from(shift);
            let moved = pose.transformed(1.0, &q, &d);
            let after = project_point(&moved, &k, &(q * x + d)).unwrap();
            prop_assert!((before - after).norm() < 1e-7);
        }
    }
}
