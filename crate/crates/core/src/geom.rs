//! Camera model, rigid transforms, and the pinhole projection that anchors
//! every positional encoding.
//!
//! Conventions:
//! - A [`Pose`] maps world to camera: `p_cam = R * p + t`.
//! - Pixel `(row r, col c)` samples the continuous image plane at `(u, v) =
//!   (c, r)`, so a point projecting to integer coordinates lands exactly on
//!   that pixel's center.
//! - Pose increments use a product-manifold twist `(omega, v)`: rotation is
//!   left-multiplied by the Rodrigues exponential of `omega`, translation is
//!   shifted by `v`. Applying a twist and then its negation is an exact
//!   round trip.

use alloc::vec::Vec;
use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};

/// Points closer than this to the camera plane are treated as behind it.
pub const DEPTH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum GeomError {
    /// Focal lengths must be positive and the principal point inside the
    /// image.
    BadIntrinsics,
    /// Quaternion norm too far from 1 to normalize reliably.
    DegenerateQuaternion,
}

impl core::fmt::Display for GeomError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeomError::BadIntrinsics => write!(f, "invalid camera intrinsics"),
            GeomError::DegenerateQuaternion => write!(f, "quaternion norm is near zero"),
        }
    }
}

impl core::error::Error for GeomError {}

/// Pinhole intrinsics, shared by every view of a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let ok = fx > 0.0
            && fy > 0.0
            && width > 0
            && height > 0
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(GeomError::BadIntrinsics);
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Intrinsics centered on an `width x height` image with focal `f`.
    pub fn centered(f: f64, width: u32, height: u32) -> Self {
        Self::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
            .expect("positive focal length")
    }
}

/// World-to-camera rigid transform, stored as unit quaternion + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)` and a
    /// translation, normalizing the quaternion.
    pub fn from_parts(q_wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self, GeomError> {
        let [w, x, y, z] = q_wxyz;
        let norm2 = w * w + x * x + y * y + z * z;
        if !(norm2.is_finite() && norm2 > 1e-24) {
            return Err(GeomError::DegenerateQuaternion);
        }
        let q = UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, x, y, z));
        Ok(Self { rotation: q, translation: Vector3::from(translation) })
    }

    pub fn from_rotation_translation(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Camera looking at `target` from `eye`, with `up` fixing the roll.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        // Rows of R are the camera axes (x right, y down, z forward).
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        let translation = -(r * eye);
        Self { rotation, translation }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Quaternion components `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }
}

/// Applies a local twist `(omega, v)` to a pose: the rotation is
/// left-multiplied by `exp(omega)` and `v` is added to the translation.
pub fn se3_apply_increment(pose: &Pose, twist: &[f64; 6]) -> Pose {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let v = Vector3::new(twist[3], twist[4], twist[5]);
    // from_scaled_axis is the Rodrigues exponential with a series fallback
    // near zero angle.
    let dq = UnitQuaternion::from_scaled_axis(omega);
    Pose { rotation: dq * pose.rotation, translation: pose.translation + v }
}

/// Projects a world point to pixel coordinates. Returns `None` when the
/// point sits behind the camera (depth <= [`DEPTH_EPS`]).
pub fn project_point(p: Vector3<f64>, pose: &Pose, k: &CameraIntrinsics) -> Option<(Vector2<f64>, f64)> {
    let pc = pose.transform(p);
    project_camera_point(pc, k)
}

/// Projection of a point already in camera coordinates.
pub fn project_camera_point(pc: Vector3<f64>, k: &CameraIntrinsics) -> Option<(Vector2<f64>, f64)> {
    if pc.z <= DEPTH_EPS {
        return None;
    }
    let inv_z = 1.0 / pc.z;
    Some((Vector2::new(k.fx * pc.x * inv_z + k.cx, k.fy * pc.y * inv_z + k.cy), pc.z))
}

/// Analytic Jacobian of the projection with respect to the camera-frame
/// point. `None` when the point is behind the camera.
pub fn project_jacobian(p: Vector3<f64>, pose: &Pose, k: &CameraIntrinsics) -> Option<Matrix2x3<f64>> {
    let pc = pose.transform(p);
    projection_jacobian_at(pc, k)
}

/// `d(u, v) / d(p_cam)` evaluated at a camera-frame point.
pub fn projection_jacobian_at(pc: Vector3<f64>, k: &CameraIntrinsics) -> Option<Matrix2x3<f64>> {
    if pc.z <= DEPTH_EPS {
        return None;
    }
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Some(Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz2,
    ))
}

/// Dense per-pixel 3D points with confidence, standing in for the output of
/// an upstream stereo/point-map predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `height * width` world points.
    pub points: Vec<Vector3<f64>>,
    /// Strictly positive where `valid` is true.
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PointMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            points: alloc::vec![Vector3::zeros(); width * height],
            confidence: alloc::vec![0.0; width * height],
            valid: alloc::vec![false; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Checks the confidence invariant: finite and positive wherever valid.
    pub fn confidence_ok(&self) -> bool {
        self.valid
            .iter()
            .zip(&self.confidence)
            .all(|(&v, &c)| !v || (c.is_finite() && c > 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal, uniform};
    use approx::assert_relative_eq;

    fn random_pose(rng: &mut rand_chacha::ChaCha8Rng) -> Pose {
        let axis = Vector3::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        let angle = uniform(rng, -2.5, 2.5);
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        let t = Vector3::new(uniform(rng, -2.0, 2.0), uniform(rng, -2.0, 2.0), uniform(rng, -2.0, 2.0));
        Pose::from_rotation_translation(q, t)
    }

    #[test]
    fn project_point_on_optical_axis() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let (u, d) = project_point(Vector3::new(0.0, 0.0, 1.0), &Pose::identity(), &k).unwrap();
        assert_eq!((u.x, u.y, d), (50.0, 50.0, 1.0));
    }

    #[test]
    fn project_point_similar_triangles() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 200, 200).unwrap();
        let (u, d) = project_point(Vector3::new(1.0, 0.0, 2.0), &Pose::identity(), &k).unwrap();
        assert_eq!((u.x, u.y, d), (50.0, 0.0, 2.0));
    }

    #[test]
    fn project_point_behind_camera() {
        let k = CameraIntrinsics::centered(100.0, 100, 100);
        assert!(project_point(Vector3::new(0.0, 0.0, -1.0), &Pose::identity(), &k).is_none());
        assert!(project_point(Vector3::new(0.0, 0.0, 0.0), &Pose::identity(), &k).is_none());
    }

    #[test]
    fn zero_twist_is_identity() {
        let mut rng = seeded(1);
        let pose = random_pose(&mut rng);
        let updated = se3_apply_increment(&pose, &[0.0; 6]);
        assert_eq!(pose.quaternion_wxyz(), updated.quaternion_wxyz());
        assert_eq!(pose.translation(), updated.translation());
    }

    #[test]
    fn half_turn_about_z() {
        let pose = se3_apply_increment(&Pose::identity(), &[0.0, 0.0, core::f64::consts::PI, 0.0, 0.0, 0.0]);
        let p = pose.transform(Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn twist_round_trip() {
        let mut rng = seeded(42);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let mut twist = [0.0; 6];
            for t in &mut twist {
                *t = uniform(&mut rng, -1.0, 1.0);
            }
            let back = se3_apply_increment(
                &se3_apply_increment(&pose, &twist),
                &twist.map(|x| -x),
            );
            let q0 = pose.quaternion_wxyz();
            let q1 = back.quaternion_wxyz();
            // Quaternions are sign-ambiguous; compare the rotations.
            let dot: f64 = q0.iter().zip(&q1).map(|(a, b)| a * b).sum();
            assert!(dot.abs() > 1.0 - 1e-7, "rotation drifted: dot {dot}");
            assert_relative_eq!(pose.translation(), back.translation(), epsilon = 1e-7);
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let mut rng = seeded(5);
        for _ in 0..100 {
            let r = random_pose(&mut rng).rotation_matrix();
            let err = (r.transpose() * r - Matrix3::identity()).norm();
            assert!(err < 1e-9, "R^T R deviation {err}");
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_trivial_cases() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 10, 10).unwrap();
        let j = project_jacobian(Vector3::new(0.0, 0.0, 1.0), &Pose::identity(), &k).unwrap();
        assert_eq!(j, Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));

        let k = CameraIntrinsics::new(100.0, 80.0, 0.0, 0.0, 10, 10).unwrap();
        let j = project_jacobian(Vector3::new(0.0, 0.0, 2.0), &Pose::identity(), &k).unwrap();
        assert_eq!(j[(0, 0)], 50.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = seeded(9);
        let k = CameraIntrinsics::centered(120.0, 64, 64);
        let h = 1e-5;
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            // Sample a point guaranteed to sit in front of the camera.
            let pc = Vector3::new(uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, 0.5, 4.0));
            let p = pose.rotation().inverse() * (pc - pose.translation());
            let j = project_jacobian(p, &pose, &k).unwrap();
            for axis in 0..3 {
                let mut dp = Vector3::zeros();
                dp[axis] = h;
                let (up, _) = project_camera_point(pc + dp, &k).unwrap();
                let (um, _) = project_camera_point(pc - dp, &k).unwrap();
                let fd = (up - um) / (2.0 * h);
                for r in 0..2 {
                    let a = j[(r, axis)];
                    let n = fd[r];
                    let denom = a.abs().max(n.abs()).max(1e-8);
                    assert!(
                        ((a - n) / denom).abs() < 1e-5,
                        "axis {axis} row {r}: analytic {a} vs fd {n}"
                    );
                }
            }
        }
    }

    #[test]
    fn homogeneous_divide_invariance() {
        // Scaling a camera-frame point leaves the projected pixel unchanged.
        let k = CameraIntrinsics::centered(90.0, 32, 32);
        let mut rng = seeded(13);
        for _ in 0..50 {
            let pc = Vector3::new(uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, 0.2, 3.0));
            let (u0, _) = project_camera_point(pc, &k).unwrap();
            let s = uniform(&mut rng, 0.1, 10.0);
            let (u1, _) = project_camera_point(pc * s, &k).unwrap();
            assert_relative_eq!(u0, u1, epsilon = 1e-9);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.0, 3.0, 4, 4).is_ok());
    }

    #[test]
    fn look_at_faces_target() {
        let eye = Vector3::new(0.0, 0.0, -3.0);
        let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0));
        let pc = pose.transform(Vector3::zeros());
        assert_relative_eq!(pc, Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-12);
        assert_relative_eq!(pose.camera_center(), eye, epsilon = 1e-12);
    }
}
