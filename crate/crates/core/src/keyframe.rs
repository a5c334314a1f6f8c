use nalgebra::{Vector2, Vector3};

use crate::geom::Pose;
use crate::imgproc::BriefDescriptor;

/// One feature of a keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    /// Pixel observation.
    pub uv: Vector2<f64>,
    pub descriptor: BriefDescriptor,
    /// 3D position in the odometry world frame, when the front end triangulated it.
    pub point: Option<Vector3<f64>>,
    /// Front-end track id, shared by observations of the same landmark.
    pub track: Option<u64>,
}

/// A keyframe as handed over by the odometry front end.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub timestamp: f64,
    /// Body pose in the odometry world frame.
    pub pose: Pose,
    pub features: Vec<Feature>,
}

impl Keyframe {
    pub fn descriptors(&self) -> Vec<BriefDescriptor> {
        self.features.iter().map(|f| f.descriptor).collect()
    }
}
