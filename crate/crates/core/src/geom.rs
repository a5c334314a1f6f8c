//! Rotation and rigid-pose algebra.
//!
//! Euler angles follow the intrinsic Z-Y-X convention, `R = Rz(yaw) * Ry(pitch) * Rx(roll)`,
//! so yaw is always the outermost factor: freezing roll and pitch leaves a single rotation
//! about the gravity axis. Quaternions are kept with a non-negative scalar part so that
//! every rotation has exactly one serialized form.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};

/// `|cos(pitch)|` below this folds roll into yaw.
const GIMBAL_EPS: f64 = 1e-6;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = (angle + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Returns the quaternion with `w >= 0`, renormalized.
pub fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = q.into_inner();
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

/// Yaw, pitch and roll in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YprAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl YprAngles {
    pub const ZERO: YprAngles = YprAngles {
        yaw: 0.0,
        pitch: 0.0,
        roll: 0.0,
    };

    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        ypr_to_rot(self)
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        rot_to_quat(&ypr_to_rot(self))
    }
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Derivative of [`rot_z`] with respect to its angle.
pub fn rot_z_derivative(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn ypr_to_rot(a: &YprAngles) -> Matrix3<f64> {
    rot_z(a.yaw) * rot_y(a.pitch) * rot_x(a.roll)
}

/// Decomposes a rotation matrix into Z-Y-X angles.
///
/// At gimbal lock (`|cos(pitch)| < 1e-6`) roll is set to zero and the remaining
/// rotation about the vertical is reported as yaw.
pub fn rot_to_ypr(m: &Matrix3<f64>) -> YprAngles {
    let pitch = (-m[(2, 0)]).atan2((m[(0, 0)] * m[(0, 0)] + m[(1, 0)] * m[(1, 0)]).sqrt());
    let pitch = pitch.clamp(-FRAC_PI_2, FRAC_PI_2);
    if pitch.cos().abs() < GIMBAL_EPS {
        let yaw = wrap_angle((-m[(0, 1)]).atan2(m[(1, 1)]));
        return YprAngles::new(yaw, pitch, 0.0);
    }
    let yaw = wrap_angle(m[(1, 0)].atan2(m[(0, 0)]));
    let roll = wrap_angle(m[(2, 1)].atan2(m[(2, 2)]));
    YprAngles::new(yaw, pitch, roll)
}

pub fn quat_to_ypr(q: &UnitQuaternion<f64>) -> YprAngles {
    rot_to_ypr(q.to_rotation_matrix().matrix())
}

/// Canonical quaternion of a rotation matrix.
pub fn rot_to_quat(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    canonical(UnitQuaternion::from_rotation_matrix(
        &Rotation3::from_matrix_unchecked(*m),
    ))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of the axis-angle vector `v`.
pub fn so3_exp(v: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::new(*v).matrix()
}

/// Axis-angle vector of a rotation matrix, angle in `[0, pi]`.
pub fn so3_log(m: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    quat_log(&q)
}

fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonical(*q);
    let v = q.imag();
    let n = v.norm();
    if n < 1e-12 {
        return v * 2.0;
    }
    let angle = 2.0 * n.atan2(q.w);
    v * (angle / n)
}

/// Inverse of the right Jacobian of SO(3) at `v`:
/// `log(exp(v) * exp(d)) ~= v + Jr^-1(v) d` for small `d`.
pub fn right_jacobian_inv(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let k = skew(v);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Rigid body pose: `x_world = orientation * x_local + position`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn from_rotation(position: Vector3<f64>, rotation: &Matrix3<f64>) -> Self {
        Self {
            position,
            orientation: rot_to_quat(rotation),
        }
    }

    pub fn from_ypr(position: Vector3<f64>, angles: &YprAngles) -> Self {
        Self::from_rotation(position, &ypr_to_rot(angles))
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_wxyz(position: Vector3<f64>, w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::new(
            position,
            UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
        )
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        *self.orientation.to_rotation_matrix().matrix()
    }

    pub fn ypr(&self) -> YprAngles {
        quat_to_ypr(&self.orientation)
    }

    pub fn yaw(&self) -> f64 {
        self.ypr().yaw
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation * other.position,
            orientation: canonical(self.orientation * other.orientation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose {
            position: -(inv * self.position),
            orientation: canonical(inv),
        }
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (p - self.position)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords.iter().all(|v| v.is_finite())
    }
}

/// Yaw-plus-translation transform acting on world coordinates:
/// `p -> Rz(yaw) p + translation`, `yaw -> yaw + self.yaw`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correction4 {
    pub yaw: f64,
    pub translation: Vector3<f64>,
}

impl Default for Correction4 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Correction4 {
    pub fn identity() -> Self {
        Self {
            yaw: 0.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn new(yaw: f64, translation: Vector3<f64>) -> Self {
        Self { yaw, translation }
    }

    /// The correction that moves `(p_before, yaw_before)` onto `(p_after, yaw_after)`.
    pub fn between(p_before: &Vector3<f64>, yaw_before: f64, p_after: &Vector3<f64>, yaw_after: f64) -> Self {
        let yaw = wrap_angle(yaw_after - yaw_before);
        Self {
            yaw,
            translation: p_after - rot_z(yaw) * p_before,
        }
    }

    /// The 4-DOF part of `after * before^-1`.
    pub fn from_poses(before: &Pose, after: &Pose) -> Self {
        Self::between(&before.position, before.yaw(), &after.position, after.yaw())
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        rot_z(self.yaw) * p + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose::from_rotation(self.apply_point(&pose.position), &(rot_z(self.yaw) * pose.rotation()))
    }

    /// `self ∘ other`.
    pub fn then(&self, other: &Correction4) -> Correction4 {
        // other applied first, then self
        Correction4 {
            yaw: wrap_angle(self.yaw + other.yaw),
            translation: rot_z(self.yaw) * other.translation + self.translation,
        }
    }
}
