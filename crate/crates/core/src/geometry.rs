//! Pinhole camera, rigid poses and perspective projection.
//!
//! Image coordinates are continuous with `u` pointing right and `v` pointing
//! down. The origin sits on the top-left corner of the top-left pixel, so the
//! centre of pixel `(0, 0)` is `(0.5, 0.5)` and a cell of stride `s` at
//! `(row, col)` is centred on `((col + 0.5) s, (row + 0.5) s)`.

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// A 3D keypoint expressed in the model frame.
pub type Keypoint3D = Point3<f64>;

/// Camera-frame depths at or below this value are rejected by [`project`].
pub const DEPTH_EPSILON: f64 = 1e-12;

/// Pinhole intrinsics (no skew, no distortion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera whose horizontal field of view spans `width` pixels.
    pub fn from_fov(fov_deg: f64, width: u32, height: u32) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::InvalidParameter(format!(
                "field of view must lie in (0, 180) degrees, got {fov_deg}"
            )));
        }
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        CameraIntrinsics::new(f, f, 0.5 * width as f64, 0.5 * height as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "intrinsics need finite values and positive focal lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Image location in pixels. Serialized as `[u, v]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2D {
    pub u: f64,
    pub v: f64,
}

impl Point2D {
    pub const fn new(u: f64, v: f64) -> Self {
        Point2D { u, v }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl From<[f64; 2]> for Point2D {
    fn from(a: [f64; 2]) -> Self {
        Point2D::new(a[0], a[1])
    }
}

impl From<Point2D> for [f64; 2] {
    fn from(p: Point2D) -> Self {
        [p.u, p.v]
    }
}

/// Rigid transform from the model frame to the camera frame.
///
/// The rotation is held as a unit quaternion; matrices are produced on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    /// `[w, x, y, z]`
    quaternion: [f64; 4],
    translation: [f64; 3],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let [w, x, y, z] = r.quaternion;
        Pose::from_quaternion_wxyz([w, x, y, z], Vec3::from(r.translation))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            quaternion: p.quaternion_wxyz(),
            translation: p.translation.into(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(UnitQuaternion::identity(), t)
    }

    /// Quaternion given as `[w, x, y, z]`; it is normalized on the way in.
    pub fn from_quaternion_wxyz(q: [f64; 4], translation: Vec3) -> Self {
        let [w, x, y, z] = q;
        let quat = nalgebra::Quaternion::new(w, x, y, z);
        // already-unit input is kept bit for bit so poses round-trip exactly
        let rotation = if (quat.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::from_quaternion(quat)
        };
        Pose::new(rotation, translation)
    }

    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Pose::new(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    /// Builds a pose from a raw, possibly non-orthonormal matrix. The columns
    /// are Gram-Schmidt orthonormalized and the third column is replaced by
    /// the cross product of the first two, so the result is always a proper
    /// rotation.
    pub fn from_rotation_matrix(m: &Mat3, translation: Vec3) -> Result<Self> {
        let c0 = m.column(0).into_owned();
        let c1 = m.column(1).into_owned();
        let n0 = c0.norm();
        if !(n0 > 1e-12) {
            return Err(Error::InvalidParameter("rotation matrix has a null column".into()));
        }
        let e0 = c0 / n0;
        let c1 = c1 - e0 * e0.dot(&c1);
        let n1 = c1.norm();
        if !(n1 > 1e-12) {
            return Err(Error::InvalidParameter("rotation matrix columns are dependent".into()));
        }
        let e1 = c1 / n1;
        let e2 = e0.cross(&e1);
        let r = Rotation3::from_matrix_unchecked(Mat3::from_columns(&[e0, e1, e2]));
        Ok(Pose::new(UnitQuaternion::from_rotation_matrix(&r), translation))
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = UnitQuaternion::new_normalize(*(self.rotation * other.rotation).quaternion());
        Pose::new(rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Keypoint3D) -> Vec3 {
        self.rotation * p.coords + self.translation
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Rotation drawn uniformly from SO(3) by normalizing a 4D standard Gaussian.
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(q[0] / n, q[1] / n, q[2] / n, q[3] / n));
        }
    }
}

/// `R p + t`.
pub fn transform_to_camera(pose: &Pose, p: &Keypoint3D) -> Vec3 {
    pose.transform_point(p)
}

/// Projects a camera-frame point through the pinhole model.
pub fn project_camera_point(k: &CameraIntrinsics, pc: &Vec3) -> Result<Point2D> {
    if !(pc.z > DEPTH_EPSILON) {
        return Err(Error::NonPositiveDepth { depth: pc.z });
    }
    Ok(Point2D::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

pub fn project(k: &CameraIntrinsics, pose: &Pose, p: &Keypoint3D) -> Result<Point2D> {
    project_camera_point(k, &transform_to_camera(pose, p))
}

/// Ray `K⁻¹ [u, v, 1]ᵀ` through an image location; its z component is 1.
pub fn backproject_ray(k: &CameraIntrinsics, u: &Point2D) -> Vec3 {
    Vec3::new((u.u - k.cx) / k.fx, (u.v - k.cy) / k.fy, 1.0)
}
