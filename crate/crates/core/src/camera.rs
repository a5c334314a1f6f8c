//! Pinhole camera and the fixed body-to-camera mounting.
//!
//! Body frames are x-forward, y-left, z-up so that Z-Y-X angles of a body pose are
//! yaw, pitch and roll in the usual sense. The camera looks along body +x with
//! the optical convention z-forward, x-right, y-down.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use crate::geom::Pose;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 460.0,
            fy: 460.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0
    }

    /// Pixel coordinates of a point in the camera frame; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 1e-9 {
            return None;
        }
        Some(self.project_unchecked(p))
    }

    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Jacobian of [`Self::project_unchecked`] with respect to the camera-frame point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Normalized image-plane ray for a pixel (z = 1).
    pub fn unproject(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, uv: &Vector2<f64>, border: f64) -> bool {
        uv.x >= border
            && uv.y >= border
            && uv.x <= self.width as f64 - 1.0 - border
            && uv.y <= self.height as f64 - 1.0 - border
    }
}

/// Rotation taking camera-frame vectors into the body frame.
pub fn body_from_camera() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// World pose of the camera mounted on a body at `body`.
pub fn camera_pose(body: &Pose) -> Pose {
    Pose::from_rotation(body.position, &(body.rotation() * body_from_camera()))
}

/// Body pose of a camera at `camera`.
pub fn body_pose(camera: &Pose) -> Pose {
    Pose::from_rotation(camera.position, &(camera.rotation() * body_from_camera().transpose()))
}

/// Camera-frame coordinates of a world point seen from body pose `body`.
pub fn world_to_camera(body: &Pose, p_world: &Vector3<f64>) -> Vector3<f64> {
    body_from_camera().transpose() * body.inverse_transform_point(p_world)
}
